"""Synthetic lip-video corpus, manifests, split protocols, patch sampling.

The generator renders a stylized face scene (96x72 grayscale) whose mouth is
an ellipse opening and closing along a word-specific aperture trajectory.
Word identity lives in the trajectory (baseline opening, oscillation rate,
phase), speaker identity in a fixed geometric offset/scale and brightness
bias, and each occurrence adds small seeded jitter plus pixel noise.  Scenes
come with per-frame ground-truth mouth boxes so detection quality can be
scored and patch datasets can be labeled without a human in the loop.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError
from .tensor import load_tensor
from .vision import ROI, box_iou, crop_resize, frames_to_tensor, pad_frames

SCENE_W = 96
SCENE_H = 72

# word list used for synthetic vocabularies; distinct initial letters
WORDS = [
    "alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf",
    "hotel", "india", "juliett", "kilo", "lima", "mike", "november",
    "oscar", "papa", "quebec", "romeo", "sierra", "tango", "uniform",
    "victor", "whiskey", "xray", "yankee", "zulu", "zero",
]


@dataclass(frozen=True)
class Profile:
    name: str
    length: int  # frames per video after padding
    height: int
    width: int


PROFILES = {
    "bbc": Profile("bbc", 29, 42, 72),
    "miracl": Profile("miracl", 25, 28, 72),
    "grid": Profile("grid", 25, 28, 72),
    "desk": Profile("desk", 12, 24, 36),
}


def get_profile(name: str) -> Profile:
    try:
        return PROFILES[name]
    except KeyError:
        raise ConfigError(
            f"unknown profile '{name}', choose from {sorted(PROFILES)}"
        ) from None


def make_vocabulary(size: int) -> list:
    if not 1 <= size <= len(WORDS):
        raise ConfigError(f"vocabulary size must be in [1, {len(WORDS)}], got {size}")
    return WORDS[:size]


@dataclass
class Record:
    path: str  # relative to the manifest directory
    label: int
    speaker: str
    source_len: int
    rois: list | None = None  # per-frame [x, y, w, h] ground truth, if known


@dataclass
class Manifest:
    vocabulary: list
    profile: Profile
    records: list = field(default_factory=list)
    base_dir: str = "."

    def resolve(self, record: Record) -> str:
        return os.path.join(self.base_dir, record.path)

    def speakers(self) -> list:
        return sorted({r.speaker for r in self.records})

    def subset(self, records) -> "Manifest":
        return Manifest(
            vocabulary=self.vocabulary,
            profile=self.profile,
            records=list(records),
            base_dir=self.base_dir,
        )


def save_manifest(path, manifest: Manifest) -> None:
    with open(path, "w") as fp:
        header = {
            "vocabulary": manifest.vocabulary,
            "profile": {
                "name": manifest.profile.name,
                "T": manifest.profile.length,
                "H": manifest.profile.height,
                "W": manifest.profile.width,
            },
        }
        fp.write(json.dumps(header, sort_keys=True) + "\n")
        for r in manifest.records:
            row = {
                "path": r.path,
                "label": r.label,
                "speaker": r.speaker,
                "source_len": r.source_len,
            }
            if r.rois is not None:
                row["rois"] = [list(map(int, roi)) for roi in r.rois]
            fp.write(json.dumps(row, sort_keys=True) + "\n")


def load_manifest(path) -> Manifest:
    base_dir = os.path.dirname(os.path.abspath(path))
    with open(path) as fp:
        lines = [line for line in fp.read().splitlines() if line.strip()]
    if not lines:
        raise DataError(f"manifest {path} is empty")
    try:
        header = json.loads(lines[0])
        prof = header["profile"]
        profile = Profile(
            prof.get("name", "custom"), int(prof["T"]), int(prof["H"]), int(prof["W"])
        )
        vocabulary = list(header["vocabulary"])
        records = []
        for line in lines[1:]:
            row = json.loads(line)
            records.append(
                Record(
                    path=row["path"],
                    label=int(row["label"]),
                    speaker=str(row["speaker"]),
                    source_len=int(row["source_len"]),
                    rois=row.get("rois"),
                )
            )
    except (KeyError, ValueError, TypeError) as exc:
        raise DataError(f"manifest {path} is malformed: {exc}") from exc
    for r in records:
        if not 0 <= r.label < len(vocabulary):
            raise DataError(
                f"manifest {path}: label {r.label} outside vocabulary "
                f"of {len(vocabulary)} words"
            )
    return Manifest(vocabulary=vocabulary, profile=profile, records=records, base_dir=base_dir)


def _speaker_traits(seed: int, speaker_idx: int):
    rng = np.random.default_rng([seed, 101, speaker_idx])
    return {
        "dx": float(rng.uniform(-4.0, 4.0)),
        "dy": float(rng.uniform(-3.0, 3.0)),
        "scale": float(rng.uniform(0.92, 1.08)),
        "brightness": float(rng.uniform(-0.05, 0.05)),
    }


def _word_trajectory(word_id: int, n: int, phase_jitter: float, amp_jitter: float):
    base = 0.5 + 0.18 * ((word_id % 3) - 1)
    freq = 0.9 + 0.4 * (word_id // 3)
    phase = 0.77 * word_id + phase_jitter
    tau = np.arange(n) / max(n - 1, 1)
    a = base + (0.38 + amp_jitter) * np.sin(2.0 * np.pi * (freq * tau + phase))
    return np.clip(a, 0.02, 0.98)


def _ellipse_alpha(xx, yy, cx, cy, rx, ry):
    # soft-edged ellipse coverage in [0,1]
    d = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2
    return np.clip(1.5 * (1.0 - d), 0.0, 1.0)


def render_scene_video(word_id, speaker_idx, occurrence, profile: Profile, seed: int):
    """Render raw scene frames plus the per-frame ground-truth mouth box.

    Returns ``(frames [source_len, SCENE_H, SCENE_W] float64, rois, source_len)``
    where every roi is the same (x, y, w, h) box sized for the fully open
    mouth, so crops keep the aperture signal instead of normalizing it away.
    """
    traits = _speaker_traits(seed, speaker_idx)
    rng = np.random.default_rng([seed, 202, word_id, speaker_idx, occurrence])
    t_max = profile.length
    source_len = int(rng.integers(int(np.ceil(0.6 * t_max)), t_max + 1))
    phase_jitter = float(rng.uniform(-0.12, 0.12))
    amp_jitter = float(rng.uniform(-0.03, 0.03))
    jx = float(rng.uniform(-1.0, 1.0))
    jy = float(rng.uniform(-1.0, 1.0))
    aperture = _word_trajectory(word_id, source_len, phase_jitter, amp_jitter)

    s = traits["scale"]
    cx = 48.0 + traits["dx"] + jx
    cy = 52.0 + traits["dy"] + jy
    lip_rx = 13.0 * s
    yy, xx = np.mgrid[0:SCENE_H, 0:SCENE_W].astype(np.float64)

    base = 0.55 + traits["brightness"] - 0.08 * (yy / SCENE_H)
    face = _ellipse_alpha(xx, yy, 48.0 + traits["dx"], 38.0, 34.0 * s, 32.0 * s)
    scene0 = base * (1.0 - face) + (base + 0.07) * face
    for ex in (34.0, 62.0):
        eye = _ellipse_alpha(xx, yy, ex + traits["dx"], 22.0 + traits["dy"], 4.0 * s, 2.5 * s)
        scene0 = scene0 * (1.0 - eye) + 0.25 * eye

    frames = np.empty((source_len, SCENE_H, SCENE_W), dtype=np.float64)
    for t in range(source_len):
        a = aperture[t]
        lip_ry = s * (2.5 + 8.5 * a)
        frame = scene0.copy()
        lips = _ellipse_alpha(xx, yy, cx, cy, lip_rx, lip_ry)
        frame = frame * (1.0 - lips) + 0.30 * lips
        if a > 0.12:
            cavity = _ellipse_alpha(xx, yy, cx, cy, lip_rx * 0.6, lip_ry * 0.6)
            frame = frame * (1.0 - cavity) + 0.10 * cavity
        frame = frame + rng.normal(0.0, 0.02, size=frame.shape)
        frames[t] = np.clip(frame, 0.0, 1.0)

    half_w = lip_rx + 4.0
    half_h = 11.0 * s + 4.0
    x0 = int(round(cx - half_w))
    y0 = int(round(cy - half_h))
    w = int(round(2.0 * half_w))
    h = int(round(2.0 * half_h))
    x0 = min(max(x0, 0), SCENE_W - w)
    y0 = min(max(y0, 0), SCENE_H - h)
    rois = [(x0, y0, w, h)] * source_len
    return frames, rois, source_len


def synthesize_word_video(word_id, speaker_idx, occurrence, profile: Profile, seed: int):
    """Ground-truth-cropped video in the profile's [T, 1, H, W] layout."""
    frames, rois, source_len = render_scene_video(
        word_id, speaker_idx, occurrence, profile, seed
    )
    cropped = np.empty((source_len, profile.height, profile.width), dtype=np.float64)
    for t in range(source_len):
        x, y, w, h = rois[t]
        cropped[t] = crop_resize(frames[t], ROI(x, y, w, h), profile.width, profile.height)
    padded = pad_frames(cropped, profile.length)
    sample = frames_to_tensor(padded)
    return sample, rois, source_len


def _check_counts(keys, need, key_name):
    for key, records in keys.items():
        if len(records) < need:
            raise DataError(
                f"{key_name} {key!r} has {len(records)} records, "
                f"needs at least {need}"
            )


def _group_by(records, key_fn):
    groups = {}
    for r in records:
        groups.setdefault(key_fn(r), []).append(r)
    return dict(sorted(groups.items()))


def _partition_group(records, counts, rng):
    order = rng.permutation(len(records))
    out = []
    start = 0
    for c in counts:
        out.append([records[i] for i in order[start : start + c]])
        start += c
    return out


def split_per_class_counts(manifest: Manifest, n_train, n_val, n_test, seed):
    """Per word class: seeded shuffle, then the first n_train/n_val/n_test."""
    groups = _group_by(manifest.records, lambda r: r.label)
    need = n_train + n_val + n_test
    for label, records in groups.items():
        if len(records) < need:
            word = manifest.vocabulary[label]
            raise DataError(
                f"class '{word}' has {len(records)} occurrences, needs {need}"
            )
    rng = np.random.default_rng([seed, 11])
    train, val, test = [], [], []
    for label, records in groups.items():
        tr, va, te = _partition_group(records, (n_train, n_val, n_test), rng)
        train += tr
        val += va
        test += te
    return manifest.subset(train), manifest.subset(val), manifest.subset(test)


def split_speaker_dependent(
    manifest: Manifest, per_word_train=8, per_word_val=1, per_word_test=1, seed=0
):
    """Per (speaker, word) pair: seeded train/val/test occurrence assignment."""
    groups = _group_by(manifest.records, lambda r: (r.speaker, r.label))
    need = per_word_train + per_word_val + per_word_test
    _check_counts(groups, need, "(speaker, word) pair")
    rng = np.random.default_rng([seed, 22])
    train, val, test = [], [], []
    for key, records in groups.items():
        tr, va, te = _partition_group(
            records, (per_word_train, per_word_val, per_word_test), rng
        )
        train += tr
        val += va
        test += te
    return manifest.subset(train), manifest.subset(val), manifest.subset(test)


def split_held_out_speaker(manifest: Manifest, test_speaker, val_speaker, seed=0):
    """Whole-speaker split: one test speaker, one val speaker, rest train."""
    if test_speaker == val_speaker:
        raise ConfigError("test and val speaker must differ")
    speakers = set(manifest.speakers())
    for who, name in ((test_speaker, "test"), (val_speaker, "val")):
        if who not in speakers:
            raise DataError(f"unknown {name} speaker {who!r}")
    train = [r for r in manifest.records if r.speaker not in (test_speaker, val_speaker)]
    val = [r for r in manifest.records if r.speaker == val_speaker]
    test = [r for r in manifest.records if r.speaker == test_speaker]
    return manifest.subset(train), manifest.subset(val), manifest.subset(test)


def _largest_remainder_counts(n: int, fractions) -> list:
    exact = [n * f for f in fractions]
    counts = [int(np.floor(e)) for e in exact]
    short = n - sum(counts)
    remainders = sorted(
        range(len(fractions)), key=lambda i: (-(exact[i] - counts[i]), i)
    )
    for i in remainders[:short]:
        counts[i] += 1
    return counts


def split_per_speaker_fraction(manifest: Manifest, fractions=(0.90, 0.05, 0.05), seed=0):
    """Per speaker: seeded shuffle, contiguous largest-remainder allocation."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"fractions {fractions} must sum to 1")
    groups = _group_by(manifest.records, lambda r: r.speaker)
    rng = np.random.default_rng([seed, 33])
    train, val, test = [], [], []
    for speaker, records in groups.items():
        counts = _largest_remainder_counts(len(records), fractions)
        tr, va, te = _partition_group(records, counts, rng)
        train += tr
        val += va
        test += te
    return manifest.subset(train), manifest.subset(val), manifest.subset(test)


def build_patch_dataset(
    manifest: Manifest,
    patch_h: int,
    patch_w: int,
    n_patches: int,
    seed: int,
    max_attempts: int = 200,
):
    """Balanced lip/non-lip patches cut from scene frames with known boxes.

    Positives overlap the ground-truth mouth box with IoU >= 0.5, negatives
    with IoU <= 0.1; both are resized to (patch_h, patch_w).  Raises when a
    patch cannot be placed within the attempt budget.  Also returns the
    sampled windows as (record_index, frame_index, x, y, w, h) rows so label
    consistency can be re-measured against the ground truth.
    """
    usable = [r for r in manifest.records if r.rois]
    if not usable:
        raise DataError("no manifest records carry ground-truth mouth boxes")
    record_index = {id(r): i for i, r in enumerate(manifest.records)}
    rng = np.random.default_rng([seed, 44])
    patches = np.empty((n_patches, 1, patch_h, patch_w), dtype=np.float32)
    labels = np.empty(n_patches, dtype=np.int64)
    boxes = []
    cache = {}
    for i in range(n_patches):
        want_positive = i % 2 == 0
        record = usable[int(rng.integers(len(usable)))]
        path = manifest.resolve(record)
        if path not in cache:
            cache[path] = load_tensor(path)
            if len(cache) > 64:
                cache.pop(next(iter(cache)))
        frames = cache[path]
        t = int(rng.integers(frames.shape[0]))
        frame = frames[t]
        gx, gy, gw, gh = record.rois[min(t, len(record.rois) - 1)]
        frame_h, frame_w = frame.shape
        placed = False
        for _ in range(max_attempts):
            ws = gw * float(rng.uniform(0.9, 1.15))
            hs = gh * float(rng.uniform(0.9, 1.15))
            w = max(4, min(int(round(ws)), frame_w))
            h = max(4, min(int(round(hs)), frame_h))
            if want_positive:
                x = gx + int(round(rng.uniform(-0.15, 0.15) * gw))
                y = gy + int(round(rng.uniform(-0.15, 0.15) * gh))
            else:
                x = int(rng.integers(0, frame_w - w + 1))
                y = int(rng.integers(0, frame_h - h + 1))
            x = min(max(x, 0), frame_w - w)
            y = min(max(y, 0), frame_h - h)
            iou = box_iou((x, y, w, h), (gx, gy, gw, gh))
            if (want_positive and iou >= 0.5) or (not want_positive and iou <= 0.1):
                patch = crop_resize(frame, ROI(x, y, w, h), patch_w, patch_h)
                patches[i, 0] = patch.astype(np.float32)
                labels[i] = 1 if want_positive else 0
                boxes.append((record_index[id(record)], t, x, y, w, h))
                placed = True
                break
        if not placed:
            kind = "positive" if want_positive else "negative"
            raise DataError(
                f"could not place a {kind} patch within {max_attempts} attempts"
            )
    return patches, labels, boxes


def load_batch(manifest: Manifest, indices):
    """Stack stored [T,1,H,W] tensors for the given record indices."""
    p = manifest.profile
    frames = np.empty(
        (len(indices), p.length, 1, p.height, p.width), dtype=np.float32
    )
    labels = np.empty(len(indices), dtype=np.int64)
    for row, idx in enumerate(indices):
        record = manifest.records[idx]
        path = manifest.resolve(record)
        if not os.path.exists(path):
            raise DataError(f"frame file {path} is missing")
        a = load_tensor(path)
        expected = (p.length, 1, p.height, p.width)
        if a.shape != expected:
            raise DataError(
                f"profile mismatch: {path} has shape {a.shape}, "
                f"manifest profile wants {expected}"
            )
        frames[row] = a
        labels[row] = record.label
    return frames, labels


def build_image_dir_manifest(root, profile: Profile, vocabulary) -> Manifest:
    """Manifest over a directory tree of raw frame images.

    Layout: ``<root>/<word>/<speaker>/<occurrence>/*.png`` (or .pgm).  Records
    point at occurrence directories; the preprocess stage turns them into
    tensors.  Frame counts become source_len, capped at the profile length.
    """
    root = os.path.abspath(root)
    word_index = {w: i for i, w in enumerate(vocabulary)}
    records = []
    for word in sorted(os.listdir(root)):
        word_dir = os.path.join(root, word)
        if not os.path.isdir(word_dir):
            continue
        if word not in word_index:
            raise DataError(f"directory '{word}' is not in the vocabulary")
        for speaker in sorted(os.listdir(word_dir)):
            spk_dir = os.path.join(word_dir, speaker)
            if not os.path.isdir(spk_dir):
                continue
            for occ in sorted(os.listdir(spk_dir)):
                occ_dir = os.path.join(spk_dir, occ)
                if not os.path.isdir(occ_dir):
                    continue
                n_frames = len(
                    [
                        f
                        for f in os.listdir(occ_dir)
                        if f.lower().endswith((".png", ".pgm"))
                    ]
                )
                if n_frames == 0:
                    raise DataError(f"{occ_dir} contains no frame images")
                records.append(
                    Record(
                        path=os.path.relpath(occ_dir, root),
                        label=word_index[word],
                        speaker=speaker,
                        source_len=min(n_frames, profile.length),
                    )
                )
    if not records:
        raise DataError(f"no occurrence directories found under {root}")
    return Manifest(
        vocabulary=list(vocabulary), profile=profile, records=records, base_dir=root
    )


def load_frame_dir(path) -> np.ndarray:
    """Frames of one occurrence directory as an [n, h, w] float stack.

    Grayscale PGM frames are read natively; PNG decoding is out of scope,
    so .png files get a pointed error instead of a silent skip.
    """
    from .evaluation import read_pgm

    names = sorted(
        f for f in os.listdir(path) if f.lower().endswith((".png", ".pgm"))
    )
    if not names:
        raise DataError(f"{path} contains no frame images")
    rows = []
    for name in names:
        full = os.path.join(path, name)
        if name.lower().endswith(".png"):
            raise DataError(
                f"{full}: png frames cannot be decoded here; "
                "convert them to 8-bit binary pgm first"
            )
        rows.append(read_pgm(full))
    shapes = {r.shape for r in rows}
    if len(shapes) != 1:
        raise DataError(
            f"{path}: frame sizes disagree: {sorted(shapes)}"
        )
    return np.stack(rows)


def check_partition(manifest: Manifest, splits) -> None:
    """Raise unless the splits are pairwise disjoint and cover the manifest."""
    def key(r):
        return (r.path, r.label, r.speaker)

    seen = {}
    for name, split in splits.items():
        for r in split.records:
            k = key(r)
            if k in seen:
                raise DataError(
                    f"record {r.path} appears in both '{seen[k]}' and '{name}'"
                )
            seen[k] = name
    all_keys = {key(r) for r in manifest.records}
    if set(seen) != all_keys:
        missing = len(all_keys - set(seen))
        extra = len(set(seen) - all_keys)
        raise DataError(
            f"splits do not partition the manifest ({missing} missing, {extra} extra)"
        )
