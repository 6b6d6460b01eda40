"""Batch pipeline entry points.

Subcommands wire the stages end to end: synth -> preprocess -> split ->
train-cae / train-baseline-cnn -> extract-features -> train-lstm -> eval,
plus msi (all held-out-speaker folds) and visualize.  Every subcommand
writes a run.meta file with the resolved config hash and seed, never
mutates its inputs, and exits 0 on success.  Failures print one JSON line
to stderr and exit 2 (usage), 3 (config), 4 (data), or 5 (divergence).
"""

import os
import sys

# Cap BLAS threads before numpy loads so library math is reproducible;
# harmless if numpy is already imported in-process.
_THREADS = os.environ.get("VISEMEFLOW_THREADS", "1")
for _var in (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
):
    os.environ.setdefault(_var, _THREADS)

import argparse
import hashlib
import json

import numpy as np

from . import evaluation, figures, models
from .datasets import (
    Manifest,
    check_partition,
    get_profile,
    load_batch,
    load_frame_dir,
    load_manifest,
    make_vocabulary,
    render_scene_video,
    save_manifest,
    split_held_out_speaker,
    split_per_class_counts,
    split_per_speaker_fraction,
    split_speaker_dependent,
    build_patch_dataset,
)
from .errors import ConfigError, DataError, TrainingDivergedError
from .optim import OptimizerState, load_checkpoint, save_checkpoint
from .tensor import load_tensor, save_tensor
from .vision import (
    ROI,
    crop_resize,
    default_cascade,
    extract_mouth,
    frames_to_tensor,
    load_cascade,
    pad_frames,
)

DEFAULTS = {
    # corpus
    "profile": "desk",
    "arch": "desk",
    "seed": 7,
    "words": 10,
    "speakers": 15,
    "occurrences": 10,
    # preprocessing
    "fixed_roi": False,
    "cascade": "",
    # split protocols
    "protocol": "msd",
    "train_count": 900,
    "val_count": 50,
    "test_count": 50,
    "train_occ": 8,
    "val_occ": 1,
    "test_occ": 1,
    "test_speaker": "",
    "val_speaker": "",
    "train_frac": 0.90,
    "val_frac": 0.05,
    "test_frac": 0.05,
    # autoencoder phase
    "cae_learning_rate": 1.0,
    "cae_momentum": 0.9,
    "cae_batch_size": 32,
    "cae_max_epochs": 40,
    "cae_patience": 10,
    "cae_frame_cap": 4096,
    "cae_val_frame_cap": 512,
    # baseline patch classifier
    "cnn_learning_rate": 0.05,
    "cnn_momentum": 0.9,
    "cnn_batch_size": 32,
    "cnn_max_epochs": 30,
    "cnn_patience": 8,
    "patch_count": 600,
    "patch_val_count": 120,
    # sequence classifier phase
    "lstm_learning_rate": 0.1,
    "lstm_momentum": 0.9,
    "lstm_batch_size": 32,
    "lstm_max_epochs": 80,
    "lstm_patience": 20,
    "lstm_clip": 5.0,
    # visualization
    "tau": 1e-3,
    "record_index": 0,
    "frame_index": 0,
}


# ---------------------------------------------------------------------------
# configuration plumbing


def _coerce(key: str, text: str):
    default = DEFAULTS[key]
    if isinstance(default, bool):
        low = text.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"config key {key} wants a boolean, got {text!r}")
    try:
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError as exc:
        raise ConfigError(f"config key {key}: {exc}") from exc
    return text


def parse_config_file(path) -> dict:
    """Flat ``key = value`` lines; `#` starts a comment."""
    if not os.path.exists(path):
        raise ConfigError(f"config file {path} does not exist")
    out = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            key = key.replace("-", "_")
            if key not in DEFAULTS:
                raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
            out[key] = _coerce(key, value)
    return out


def parse_overrides(extra) -> dict:
    out = {}
    i = 0
    while i < len(extra):
        token = extra[i]
        if not token.startswith("--"):
            raise ConfigError(f"unexpected argument {token!r}")
        key = token[2:].replace("-", "_")
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            if i + 1 >= len(extra):
                raise ConfigError(f"override {token} is missing a value")
            value = extra[i + 1]
            i += 1
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        out[key] = _coerce(key, value)
        i += 1
    return out


def resolve_config(args, extra) -> dict:
    cfg = dict(DEFAULTS)
    if getattr(args, "config", None):
        cfg.update(parse_config_file(args.config))
    cfg.update(parse_overrides(extra))
    if getattr(args, "fixed_roi", False):
        cfg["fixed_roi"] = True
    get_profile(cfg["profile"])  # validates the name
    if cfg["arch"] not in models.ARCHITECTURES:
        raise ConfigError(
            f"unknown architecture {cfg['arch']!r}; "
            f"choose from {sorted(models.ARCHITECTURES)}"
        )
    return cfg


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode("ascii")
    return hashlib.sha256(blob).hexdigest()[:16]


def write_run_meta(out_dir, command: str, cfg: dict) -> None:
    meta = {
        "command": command,
        "config": {k: cfg[k] for k in sorted(cfg)},
        "config_hash": config_hash(cfg),
        "seed": cfg["seed"],
    }
    with open(os.path.join(out_dir, "run.meta"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# shared helpers


def _ensure_dir(path) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def _dir_manifest(data_dir) -> Manifest:
    path = os.path.join(data_dir, "manifest.jsonl")
    if not os.path.exists(path):
        raise DataError(f"no manifest.jsonl under {data_dir}")
    return load_manifest(path)


def _load_splits(path) -> dict:
    if not os.path.exists(path):
        raise DataError(f"splits file {path} does not exist")
    with open(path) as fh:
        raw = json.load(fh)
    for name in ("train", "val", "test"):
        if name not in raw:
            raise DataError(f"splits file {path} is missing the {name} entry")
    return raw


def _split_indices(manifest: Manifest, splits: dict) -> dict:
    # Splits store record indices, not paths, so one splits.json applies to
    # every corpus derived from the source (preprocess and extract-features
    # keep record order and count unchanged).
    n = len(manifest.records)
    declared = splits.get("source_records")
    if declared is not None and declared != n:
        raise DataError(
            f"splits were computed on a corpus of {declared} records, "
            f"this corpus has {n}"
        )
    out = {}
    for name in ("train", "val", "test"):
        indices = [int(i) for i in splits[name]]
        for i in indices:
            if not 0 <= i < n:
                raise DataError(f"split index {i} outside corpus of {n} records")
        out[name] = indices
    return out


def _part_indices(manifest: Manifest, part: Manifest) -> list:
    by_path = {r.path: i for i, r in enumerate(manifest.records)}
    return sorted(by_path[r.path] for r in part.records)


def _require_file(path, what: str) -> str:
    if not path or not os.path.exists(path):
        raise DataError(f"missing {what}: {path or '(not given)'}")
    return path


def _architecture(cfg, manifest: Manifest):
    profile = manifest.profile
    return models.ARCHITECTURES[cfg["arch"]](profile, len(manifest.vocabulary))


def _optimizer_state(cfg, prefix: str, clip=None) -> OptimizerState:
    return OptimizerState(
        learning_rate=cfg[f"{prefix}_learning_rate"],
        momentum=cfg[f"{prefix}_momentum"],
        batch_size=cfg[f"{prefix}_batch_size"],
        max_epochs=cfg[f"{prefix}_max_epochs"],
        patience=cfg[f"{prefix}_patience"],
        clip_norm=clip,
    )


def collect_frames(manifest: Manifest, indices, cap: int, seed: int, tag: int):
    """Real (unpadded) frames from the given records, seed-capped to ``cap``."""
    profile = manifest.profile
    pairs = []
    for idx in indices:
        rec = manifest.records[idx]
        for t in range(min(rec.source_len, profile.length)):
            pairs.append((idx, t))
    if not pairs:
        raise DataError("no frames to collect")
    if cap and len(pairs) > cap:
        rng = np.random.default_rng([seed, tag])
        chosen = rng.choice(len(pairs), size=cap, replace=False)
        pairs = [pairs[i] for i in sorted(chosen)]
    frames = np.empty(
        (len(pairs), 1, profile.height, profile.width), dtype=np.float32
    )
    cache_idx, cache = None, None
    for row, (idx, t) in enumerate(pairs):
        if idx != cache_idx:
            cache, _ = load_batch(manifest, [idx])
            cache_idx = idx
        frames[row] = cache[0, t]
    return frames


def _train_cae_stage(cfg, manifest, indices, out_dir, seed):
    desc = _architecture(cfg, manifest)
    train_frames = collect_frames(manifest, indices["train"], cfg["cae_frame_cap"], seed, 55)
    val_frames = collect_frames(
        manifest, indices["val"], cfg["cae_val_frame_cap"], seed, 56
    )
    state = _optimizer_state(cfg, "cae")
    ckpt = models.train_cae(desc, train_frames, val_frames, state, seed)
    path = os.path.join(out_dir, "cae.ckpt")
    save_checkpoint(path, ckpt)
    figures.save_loss_curve(
        ckpt.metadata["metric_history"], os.path.join(out_dir, "cae_loss.png")
    )
    return path, ckpt


def _extract_stage(params, desc, manifest, indices_list, out_dir, extractor):
    extract = (
        models.cae_extract_features
        if extractor == "cae"
        else models.cnn_extract_features
    )
    feat_dir = _ensure_dir(os.path.join(out_dir, "features"))
    new_records = []
    for i, rec in enumerate(manifest.records):
        rel = f"features/rec_{i:05d}.feat"
        if i in indices_list:
            video, _ = load_batch(manifest, [i])
            feats = extract(params, desc, video[0])
            save_tensor(os.path.join(out_dir, rel), feats.astype(np.float32))
        new_records.append(
            type(rec)(
                path=rel,
                label=rec.label,
                speaker=rec.speaker,
                source_len=rec.source_len,
                rois=rec.rois,
            )
        )
    out = Manifest(
        vocabulary=manifest.vocabulary,
        profile=manifest.profile,
        records=new_records,
        base_dir=out_dir,
    )
    save_manifest(os.path.join(out_dir, "manifest.jsonl"), out)
    return out


def _load_features(manifest: Manifest, feat_manifest: Manifest, indices):
    profile = manifest.profile
    feats = None
    labels = np.empty(len(indices), dtype=np.int64)
    for row, idx in enumerate(indices):
        rec = feat_manifest.records[idx]
        a = load_tensor(feat_manifest.resolve(rec))
        if a.ndim != 2 or a.shape[0] != profile.length:
            raise DataError(
                f"feature file {rec.path} has shape {a.shape}, "
                f"expected [{profile.length}, feature_dim]"
            )
        if feats is None:
            feats = np.empty((len(indices),) + a.shape, dtype=np.float32)
        feats[row] = a
        labels[row] = rec.label
    return feats, labels


def _train_lstm_stage(cfg, feat_manifest, indices, out_dir, seed):
    desc = _architecture(cfg, feat_manifest)
    train_x, train_y = _load_features(feat_manifest, feat_manifest, indices["train"])
    val_x, val_y = _load_features(feat_manifest, feat_manifest, indices["val"])
    if train_x.shape[2] != desc.feature_dim:
        raise ConfigError(
            f"stored features have dim {train_x.shape[2]}, architecture "
            f"{cfg['arch']} wants {desc.feature_dim}"
        )
    state = _optimizer_state(cfg, "lstm", clip=cfg["lstm_clip"])
    ckpt = models.train_lstm_classifier(
        train_x, train_y, val_x, val_y, desc, state, seed
    )
    path = os.path.join(out_dir, "lstm.ckpt")
    save_checkpoint(path, ckpt)
    figures.save_loss_curve(
        ckpt.metadata["metric_history"], os.path.join(out_dir, "lstm_loss.png")
    )
    return path, ckpt


def _eval_stage(cfg, manifest, indices, enc_params, lstm_params, desc, out_dir, extra_meta=None):
    def predict(video):
        return models.predict_word(enc_params, lstm_params, desc, video)[0]

    metadata = {"config_hash": config_hash(cfg), "seed": cfg["seed"]}
    metadata.update(extra_meta or {})
    report = evaluation.evaluate(predict, manifest, indices, metadata)
    evaluation.write_report(report, os.path.join(out_dir, "report.json"))
    evaluation.emit_confusion_csv(
        report.confusion, os.path.join(out_dir, "confusion.csv")
    )
    figures.save_confusion_figure(
        report.confusion, os.path.join(out_dir, "confusion.png")
    )
    return report


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(cfg, args):
    out_dir = _ensure_dir(args.out)
    _ensure_dir(os.path.join(out_dir, "scenes"))
    profile = get_profile(cfg["profile"])
    vocab = make_vocabulary(cfg["words"])
    seed = cfg["seed"]
    records = []
    from .datasets import Record

    for label in range(len(vocab)):
        for spk in range(cfg["speakers"]):
            for occ in range(cfg["occurrences"]):
                frames, rois, source_len = render_scene_video(
                    label, spk, occ, profile, seed
                )
                rel = f"scenes/w{label:02d}_s{spk:02d}_o{occ:03d}.ntsr"
                save_tensor(os.path.join(out_dir, rel), frames.astype(np.float32))
                records.append(
                    Record(
                        path=rel,
                        label=label,
                        speaker=f"spk{spk:02d}",
                        source_len=source_len,
                        rois=[list(r) for r in rois],
                    )
                )
    manifest = Manifest(
        vocabulary=vocab, profile=profile, records=records, base_dir=out_dir
    )
    save_manifest(os.path.join(out_dir, "manifest.jsonl"), manifest)
    write_run_meta(out_dir, "synth", cfg)


def cmd_preprocess(cfg, args):
    data_dir = _require_file(args.data, "input corpus directory")
    manifest = _dir_manifest(data_dir)
    out_dir = _ensure_dir(args.out)
    _ensure_dir(os.path.join(out_dir, "tensors"))
    profile = manifest.profile
    cascade = (
        load_cascade(cfg["cascade"]) if cfg["cascade"] else default_cascade()
    )
    new_records = []
    for i, rec in enumerate(manifest.records):
        src = manifest.resolve(rec)
        scene = load_frame_dir(src) if os.path.isdir(src) else load_tensor(src)
        if cfg["fixed_roi"] and not rec.rois:
            raise DataError(
                f"record {rec.path} has no stored ROI; cannot honor fixed_roi"
            )
        rows = np.empty(
            (len(scene), profile.height, profile.width), dtype=np.float64
        )
        prev = None
        for t in range(len(scene)):
            if cfg["fixed_roi"]:
                roi = ROI(*rec.rois[min(t, len(rec.rois) - 1)])
            else:
                roi = extract_mouth(scene[t], cascade, prev)
                prev = roi
            rows[t] = crop_resize(scene[t], roi, profile.width, profile.height)
        tensor = frames_to_tensor(pad_frames(rows, profile.length))
        rel = f"tensors/rec_{i:05d}.ntsr"
        save_tensor(os.path.join(out_dir, rel), tensor)
        new_records.append(
            type(rec)(
                path=rel,
                label=rec.label,
                speaker=rec.speaker,
                source_len=rec.source_len,
                rois=rec.rois,
            )
        )
    save_manifest(
        os.path.join(out_dir, "manifest.jsonl"),
        Manifest(
            vocabulary=manifest.vocabulary,
            profile=profile,
            records=new_records,
            base_dir=out_dir,
        ),
    )
    write_run_meta(out_dir, "preprocess", cfg)


def cmd_split(cfg, args):
    data_dir = _require_file(args.data, "input corpus directory")
    manifest = _dir_manifest(data_dir)
    out_dir = _ensure_dir(args.out)
    protocol = cfg["protocol"]
    seed = cfg["seed"]
    if protocol == "counts":
        parts = split_per_class_counts(
            manifest, cfg["train_count"], cfg["val_count"], cfg["test_count"], seed
        )
    elif protocol == "msd":
        parts = split_speaker_dependent(
            manifest, cfg["train_occ"], cfg["val_occ"], cfg["test_occ"], seed
        )
    elif protocol == "msi":
        if not cfg["test_speaker"] or not cfg["val_speaker"]:
            raise ConfigError(
                "protocol msi needs test_speaker and val_speaker settings"
            )
        parts = split_held_out_speaker(
            manifest, cfg["test_speaker"], cfg["val_speaker"], seed
        )
    elif protocol == "fractions":
        parts = split_per_speaker_fraction(
            manifest, (cfg["train_frac"], cfg["val_frac"], cfg["test_frac"]), seed
        )
    else:
        raise ConfigError(
            f"unknown split protocol {protocol!r}; "
            "choose counts, msd, msi, or fractions"
        )
    train_m, val_m, test_m = parts
    # the counts protocol deliberately subsamples a larger corpus, so check
    # it over the records it assigned; every other protocol must partition
    # the corpus exactly
    scope = manifest
    if protocol == "counts":
        scope = manifest.subset(train_m.records + val_m.records + test_m.records)
    check_partition(scope, {"train": train_m, "val": val_m, "test": test_m})
    payload = {
        "protocol": protocol,
        "source_records": len(manifest.records),
        "train": _part_indices(manifest, train_m),
        "val": _part_indices(manifest, val_m),
        "test": _part_indices(manifest, test_m),
    }
    with open(os.path.join(out_dir, "splits.json"), "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    write_run_meta(out_dir, "split", cfg)


def cmd_train_cae(cfg, args):
    manifest = _dir_manifest(_require_file(args.data, "input corpus directory"))
    splits = _load_splits(_require_file(args.splits, "splits file"))
    indices = _split_indices(manifest, splits)
    out_dir = _ensure_dir(args.out)
    _train_cae_stage(cfg, manifest, indices, out_dir, cfg["seed"])
    write_run_meta(out_dir, "train-cae", cfg)


def cmd_train_baseline_cnn(cfg, args):
    manifest = _dir_manifest(_require_file(args.data, "scene corpus directory"))
    splits = _load_splits(_require_file(args.splits, "splits file"))
    indices = _split_indices(manifest, splits)
    out_dir = _ensure_dir(args.out)
    profile = manifest.profile
    desc = _architecture(cfg, manifest)
    seed = cfg["seed"]
    train_m = manifest.subset([manifest.records[i] for i in indices["train"]])
    val_m = manifest.subset([manifest.records[i] for i in indices["val"]])
    patches, labels, _ = build_patch_dataset(
        train_m, profile.height, profile.width, cfg["patch_count"], seed
    )
    val_patches, val_labels, _ = build_patch_dataset(
        val_m, profile.height, profile.width, cfg["patch_val_count"], seed + 1
    )
    state = _optimizer_state(cfg, "cnn")
    ckpt = models.train_patch_classifier(
        desc, patches, labels, val_patches, val_labels, state, seed
    )
    save_checkpoint(os.path.join(out_dir, "cnn.ckpt"), ckpt)
    figures.save_loss_curve(
        ckpt.metadata["metric_history"], os.path.join(out_dir, "cnn_loss.png")
    )
    write_run_meta(out_dir, "train-baseline-cnn", cfg)


def cmd_extract_features(cfg, args):
    manifest = _dir_manifest(_require_file(args.data, "input corpus directory"))
    ckpt_path = _require_file(args.checkpoint, "checkpoint")
    out_dir = _ensure_dir(args.out)
    ckpt = load_checkpoint(ckpt_path, name_filter="enc.*")
    if not ckpt.params:
        raise DataError(f"checkpoint {ckpt_path} holds no encoder tensors")
    desc = models.descriptor_from_dict(ckpt.architecture)
    prof = manifest.profile
    if (desc.profile.length, desc.profile.height, desc.profile.width) != (
        prof.length,
        prof.height,
        prof.width,
    ):
        raise ConfigError(
            f"checkpoint was trained for profile "
            f"{desc.profile.name} [{desc.profile.length},{desc.profile.height},"
            f"{desc.profile.width}], corpus has {prof.name} "
            f"[{prof.length},{prof.height},{prof.width}]"
        )
    _extract_stage(
        ckpt.params, desc, manifest, set(range(len(manifest.records))),
        out_dir, args.extractor,
    )
    write_run_meta(out_dir, "extract-features", cfg)


def cmd_train_lstm(cfg, args):
    feat_manifest = _dir_manifest(_require_file(args.features, "features directory"))
    splits = _load_splits(_require_file(args.splits, "splits file"))
    indices = _split_indices(feat_manifest, splits)
    out_dir = _ensure_dir(args.out)
    _train_lstm_stage(cfg, feat_manifest, indices, out_dir, cfg["seed"])
    write_run_meta(out_dir, "train-lstm", cfg)


def cmd_eval(cfg, args):
    manifest = _dir_manifest(_require_file(args.data, "input corpus directory"))
    splits = _load_splits(_require_file(args.splits, "splits file"))
    indices = _split_indices(manifest, splits)
    out_dir = _ensure_dir(args.out)
    enc_ckpt = load_checkpoint(
        _require_file(args.encoder_checkpoint, "checkpoint"), name_filter="enc.*"
    )
    lstm_ckpt = load_checkpoint(_require_file(args.lstm_checkpoint, "checkpoint"))
    desc = models.descriptor_from_dict(enc_ckpt.architecture)
    lstm_desc = models.descriptor_from_dict(lstm_ckpt.architecture)
    if (lstm_desc.feature_dim, lstm_desc.vocab_size) != (
        desc.feature_dim,
        desc.vocab_size,
    ):
        raise ConfigError(
            "encoder and classifier checkpoints disagree: features "
            f"{desc.feature_dim}/{lstm_desc.feature_dim}, vocab "
            f"{desc.vocab_size}/{lstm_desc.vocab_size}"
        )
    _eval_stage(
        cfg, manifest, indices, enc_ckpt.params, lstm_ckpt.params, desc, out_dir
    )
    write_run_meta(out_dir, "eval", cfg)


def cmd_msi(cfg, args):
    manifest = _dir_manifest(_require_file(args.data, "input corpus directory"))
    out_dir = _ensure_dir(args.out)
    speakers = manifest.speakers()
    if len(speakers) < 3:
        raise DataError(
            f"held-out-speaker protocol needs at least 3 speakers, "
            f"found {len(speakers)}"
        )
    seed = cfg["seed"]
    reports = {}
    for k, test_speaker in enumerate(speakers):
        val_speaker = speakers[(k + 1) % len(speakers)]
        fold_dir = _ensure_dir(os.path.join(out_dir, f"fold_{test_speaker}"))
        train_m, val_m, test_m = split_held_out_speaker(
            manifest, test_speaker, val_speaker, seed
        )
        splits = {
            "protocol": "msi",
            "test_speaker": test_speaker,
            "val_speaker": val_speaker,
            "source_records": len(manifest.records),
            "train": _part_indices(manifest, train_m),
            "val": _part_indices(manifest, val_m),
            "test": _part_indices(manifest, test_m),
        }
        with open(os.path.join(fold_dir, "splits.json"), "w") as fh:
            json.dump(splits, fh, indent=2, sort_keys=True)
            fh.write("\n")
        indices = _split_indices(manifest, splits)
        _, cae_ckpt = _train_cae_stage(cfg, manifest, indices, fold_dir, seed)
        enc_params = {
            k2: v for k2, v in cae_ckpt.params.items() if k2.startswith("enc.")
        }
        desc = models.descriptor_from_dict(cae_ckpt.architecture)
        feat_manifest = _extract_stage(
            enc_params, desc, manifest,
            set(indices["train"] + indices["val"] + indices["test"]),
            fold_dir, "cae",
        )
        _, lstm_ckpt = _train_lstm_stage(cfg, feat_manifest, indices, fold_dir, seed)
        report = _eval_stage(
            cfg, manifest, indices, enc_params, lstm_ckpt.params, desc, fold_dir,
            extra_meta={"test_speaker": test_speaker, "val_speaker": val_speaker},
        )
        reports[test_speaker] = report
    average = evaluation.msi_average(reports.values())
    summary = {
        "average": average,
        "average_percent": evaluation.percent(average),
        "folds": {
            spk: reports[spk].accuracies["test"] for spk in sorted(reports)
        },
    }
    with open(os.path.join(out_dir, "msi.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    write_run_meta(out_dir, "msi", cfg)


def cmd_visualize(cfg, args):
    manifest = _dir_manifest(_require_file(args.data, "input corpus directory"))
    ckpt_path = _require_file(args.checkpoint, "checkpoint")
    out_dir = _ensure_dir(args.out)
    ckpt = load_checkpoint(ckpt_path)
    desc = models.descriptor_from_dict(ckpt.architecture)
    idx = cfg["record_index"]
    if not 0 <= idx < len(manifest.records):
        raise ConfigError(
            f"record_index {idx} outside corpus of {len(manifest.records)} records"
        )
    video, _ = load_batch(manifest, [idx])
    t = cfg["frame_index"]
    if not 0 <= t < manifest.profile.length:
        raise ConfigError(
            f"frame_index {t} outside profile length {manifest.profile.length}"
        )
    frame = video[0, t, 0]
    fm = evaluation.first_layer_feature_maps(ckpt.params, desc, frame)
    maps_dir = _ensure_dir(os.path.join(out_dir, "feature_maps"))
    evaluation.write_feature_map_pgms(fm, maps_dir)
    figures.save_feature_map_grid(fm, os.path.join(out_dir, "feature_maps.png"))
    stats = {
        "emptiness_score": evaluation.emptiness_score(fm, cfg["tau"]),
        "kernel_count": int(fm.maps.shape[0]),
        "tau": cfg["tau"],
    }
    has_decoder = any(name.startswith("dec.") for name in ckpt.params)
    if has_decoder:
        sample = video[0, : min(8, manifest.profile.length)]
        recon, _, _ = models.cae_forward(ckpt.params, desc, sample)
        recon_dir = _ensure_dir(os.path.join(out_dir, "reconstructions"))
        for i in range(len(recon)):
            evaluation.emit_pgm(
                recon[i, 0], os.path.join(recon_dir, f"recon_{i:03d}.pgm")
            )
        figures.save_reconstruction_figure(
            sample, recon, os.path.join(out_dir, "reconstructions.png")
        )
        mse = float(np.mean((recon - sample) ** 2))
        stats["sample_reconstruction_mse"] = mse
    with open(os.path.join(out_dir, "stats.json"), "w") as fh:
        json.dump(stats, fh, indent=2, sort_keys=True)
        fh.write("\n")
    write_run_meta(out_dir, "visualize", cfg)


DISPATCH = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "split": cmd_split,
    "train-cae": cmd_train_cae,
    "train-baseline-cnn": cmd_train_baseline_cnn,
    "extract-features": cmd_extract_features,
    "train-lstm": cmd_train_lstm,
    "eval": cmd_eval,
    "msi": cmd_msi,
    "visualize": cmd_visualize,
}


# ---------------------------------------------------------------------------
# argument parsing and entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _emit_error("UsageError", message)
        raise SystemExit(2)


def _emit_error(kind: str, message: str) -> None:
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")


def build_parser() -> _Parser:
    parser = _Parser(prog="visemeflow", description=__doc__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, **flags):
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="flat key = value file")
        p.add_argument("--out", required=True, help="output directory")
        for flag, kwargs in flags.items():
            p.add_argument(flag, **kwargs)
        return p

    add("synth")
    add(
        "preprocess",
        **{
            "--data": {"required": True, "help": "synth output directory"},
            "--fixed-roi": {
                "action": "store_true",
                "dest": "fixed_roi",
                "help": "crop stored ground-truth boxes instead of detecting",
            },
        },
    )
    add("split", **{"--data": {"required": True}})
    add(
        "train-cae",
        **{"--data": {"required": True}, "--splits": {"required": True}},
    )
    add(
        "train-baseline-cnn",
        **{"--data": {"required": True}, "--splits": {"required": True}},
    )
    add(
        "extract-features",
        **{
            "--data": {"required": True},
            "--checkpoint": {"required": True},
            "--extractor": {"choices": ["cae", "cnn"], "default": "cae"},
        },
    )
    add(
        "train-lstm",
        **{"--features": {"required": True}, "--splits": {"required": True}},
    )
    add(
        "eval",
        **{
            "--data": {"required": True},
            "--splits": {"required": True},
            "--encoder-checkpoint": {"required": True, "dest": "encoder_checkpoint"},
            "--lstm-checkpoint": {"required": True, "dest": "lstm_checkpoint"},
        },
    )
    add("msi", **{"--data": {"required": True}})
    add(
        "visualize",
        **{"--data": {"required": True}, "--checkpoint": {"required": True}},
    )
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    if args.command is None:
        _emit_error("UsageError", "no subcommand given")
        return 2
    try:
        cfg = resolve_config(args, extra)
        DISPATCH[args.command](cfg, args)
        return 0
    except ConfigError as exc:
        _emit_error(type(exc).__name__, str(exc))
        return 3
    except DataError as exc:
        _emit_error(type(exc).__name__, str(exc))
        return 4
    except TrainingDivergedError as exc:
        _emit_error(type(exc).__name__, str(exc))
        return 5


if __name__ == "__main__":
    sys.exit(main())
