"""Synthetic two-modality labeled image corpus.

Every identity is rendered as a stack of horizontal color stripes. The
visible modality stores the stripe colors as RGB; the infrared modality
stores the stripe luminances pushed through a dataset-level random
monotone remap, so the two modalities share structure but differ in
appearance. Additive noise and random occluding rectangles emulate
collection noise.

All randomness is derived from per-purpose seed sequences, so generation
is deterministic and may be parallelized per image without changing the
output bytes.
"""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import ConfigurationError, FormatError

MANIFEST_VERSION = "ddag-dataset/1"
MANIFEST_NAME = "manifest.json"

VISIBLE = "visible"
INFRARED = "infrared"
MODALITIES = (VISIBLE, INFRARED)

# seed-derivation namespaces (first element after the user seed)
_NS_CODES = 0
_NS_REMAP = 1
_NS_IMAGE = 2
_NS_SPLIT = 3

_LUMA = np.array([0.299, 0.587, 0.114])

_MAX_REDRAWS = 1000


@dataclass(frozen=True)
class GeneratorConfig:
    num_identities: int = 40
    images_per_identity_per_modality: int = 10
    image_size: tuple = (72, 36)
    stripes: int = 6
    noise_level: float = 0.05
    clutter_probability: float = 0.1
    min_code_distance: float = 0.08
    seed: int = 1

    def validate(self):
        height, width = self.image_size
        if self.num_identities < 2:
            raise ConfigurationError("num_identities must be >= 2, got %d" % self.num_identities)
        if self.images_per_identity_per_modality < 1:
            raise ConfigurationError("images_per_identity_per_modality must be >= 1")
        if self.stripes < 2:
            raise ConfigurationError("stripes must be >= 2, got %d" % self.stripes)
        if height < self.stripes or height % self.stripes != 0:
            raise ConfigurationError(
                "image height %d must be divisible by the stripe count %d" % (height, self.stripes)
            )
        if width < 2:
            raise ConfigurationError("image width must be >= 2")
        if self.noise_level < 0:
            raise ConfigurationError("noise_level must be >= 0")
        if not 0.0 <= self.clutter_probability <= 1.0:
            raise ConfigurationError("clutter_probability must be in [0, 1]")
        if self.min_code_distance <= 0:
            raise ConfigurationError("min_code_distance must be > 0")


@dataclass
class IdentitySpec:
    identity_id: int
    part_codes: np.ndarray           # (stripes, 3) base RGB codes in [0, 1]
    modality_gap_params: dict        # per-modality {"gain": g, "bias": b}
    visible_stripes: np.ndarray = field(repr=False, default=None)   # rendered (stripes, 3)
    infrared_stripes: np.ndarray = field(repr=False, default=None)  # rendered (stripes,)


@dataclass(frozen=True)
class SampleRecord:
    path: str
    identity: int
    modality: str
    camera: int


@dataclass
class DatasetManifest:
    version: str
    image_size: tuple
    identities: list
    records: list
    split: dict        # {"train_ids": [...], "test_ids": [...]} or None before splitting
    root: Path = None  # directory the relative record paths resolve against

    @property
    def train_ids(self):
        return list(self.split["train_ids"]) if self.split else []

    @property
    def test_ids(self):
        return list(self.split["test_ids"]) if self.split else []

    def records_for(self, identity_ids, modality=None):
        wanted = set(identity_ids)
        out = [r for r in self.records if r.identity in wanted]
        if modality is not None:
            out = [r for r in out if r.modality == modality]
        return out


def _monotone_remap(seed):
    """Piecewise-linear increasing map of [0,1] onto [0,1], fixed per dataset.

    Slopes are bounded away from zero so distinct luminances stay distinct
    after the remap.
    """
    rng = np.random.default_rng(np.random.SeedSequence((seed, _NS_REMAP)))
    slopes = rng.uniform(0.3, 1.7, size=8)
    ys = np.concatenate([[0.0], np.cumsum(slopes)])
    ys /= ys[-1]
    xs = np.linspace(0.0, 1.0, len(ys))
    return xs, ys


def _render_stripe_values(codes, gap_params, remap):
    """Per-stripe base pixel values for both modalities of one identity."""
    vis = np.clip(codes * gap_params[VISIBLE]["gain"] + gap_params[VISIBLE]["bias"], 0.0, 1.0)
    luma = codes @ _LUMA
    xs, ys = remap
    ir = np.interp(luma, xs, ys)
    ir = np.clip(ir * gap_params[INFRARED]["gain"] + gap_params[INFRARED]["bias"], 0.0, 1.0)
    return vis, ir


def _separable(vis, ir, others, min_gap):
    """True when some stripe differs by >= min_gap from every accepted identity,
    in both modalities."""
    for other in others:
        vis_gap = np.abs(vis - other.visible_stripes).max(axis=1).max()
        ir_gap = np.abs(ir - other.infrared_stripes).max()
        if vis_gap < min_gap or ir_gap < min_gap:
            return False
    return True


def _draw_identities(config, remap):
    rng = np.random.default_rng(np.random.SeedSequence((config.seed, _NS_CODES)))
    specs = []
    for identity_id in range(config.num_identities):
        for _ in range(_MAX_REDRAWS):
            codes = rng.uniform(0.08, 0.92, size=(config.stripes, 3))
            gap_params = {
                VISIBLE: {"gain": float(rng.uniform(0.95, 1.05)), "bias": float(rng.uniform(-0.03, 0.03))},
                INFRARED: {"gain": float(rng.uniform(0.95, 1.05)), "bias": float(rng.uniform(-0.03, 0.03))},
            }
            vis, ir = _render_stripe_values(codes, gap_params, remap)
            if _separable(vis, ir, specs, config.min_code_distance):
                specs.append(IdentitySpec(identity_id, codes, gap_params, vis, ir))
                break
        else:
            raise ConfigurationError(
                "could not draw %d mutually separable identities; lower num_identities "
                "or min_code_distance" % config.num_identities
            )
    return specs


def _render_image(stripe_values, image_size, noise_level, clutter_probability, rng):
    """One image as uint8. stripe_values is (stripes, channels)."""
    height, width = image_size
    channels = stripe_values.shape[1]
    band = height // stripe_values.shape[0]
    img = np.repeat(stripe_values, band, axis=0)[:, None, :] * np.ones((1, width, 1))
    if rng.random() < clutter_probability:
        for _ in range(int(rng.integers(1, 4))):
            rect_h = int(rng.integers(max(1, height // 8), height // 2 + 1))
            rect_w = int(rng.integers(max(1, width // 8), width // 2 + 1))
            y0 = int(rng.integers(0, height - rect_h + 1))
            x0 = int(rng.integers(0, width - rect_w + 1))
            img[y0:y0 + rect_h, x0:x0 + rect_w, :] = rng.uniform(0.0, 1.0, size=channels)
    if noise_level > 0:
        img = img + rng.normal(0.0, noise_level, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    return np.round(img * 255.0).astype(np.uint8)


def _save_png(array, path):
    if array.shape[2] == 1:
        image = Image.fromarray(array[:, :, 0], mode="L")
    else:
        image = Image.fromarray(array, mode="RGB")
    image.save(path, format="PNG")


def generate_dataset(config: GeneratorConfig, out_dir) -> DatasetManifest:
    """Render the corpus under out_dir and write its manifest.

    Deterministic: the same config produces byte-identical images and
    manifest. Each image draws from its own seed sequence keyed by
    (seed, identity, modality, index).
    """
    config.validate()
    out = Path(out_dir)
    remap = _monotone_remap(config.seed)
    specs = _draw_identities(config, remap)

    records = []
    for modality in MODALITIES:
        (out / "images" / modality).mkdir(parents=True, exist_ok=True)
    for spec in specs:
        stripe_values = {
            VISIBLE: spec.visible_stripes,
            INFRARED: spec.infrared_stripes[:, None],
        }
        for modality_idx, modality in enumerate(MODALITIES):
            for k in range(config.images_per_identity_per_modality):
                rng = np.random.default_rng(
                    np.random.SeedSequence((config.seed, _NS_IMAGE, spec.identity_id, modality_idx, k))
                )
                array = _render_image(
                    stripe_values[modality], config.image_size,
                    config.noise_level, config.clutter_probability, rng,
                )
                rel = "images/%s/%04d_%03d.png" % (modality, spec.identity_id, k)
                _save_png(array, out / rel)
                camera = 2 * modality_idx + (k % 2)
                records.append(SampleRecord(rel, spec.identity_id, modality, camera))

    manifest = DatasetManifest(
        version=MANIFEST_VERSION,
        image_size=tuple(config.image_size),
        identities=[s.identity_id for s in specs],
        records=records,
        split=None,
        root=out,
    )
    save_manifest(manifest, out / MANIFEST_NAME)
    return manifest


def split_train_test(manifest: DatasetManifest, train_fraction: float, seed: int) -> DatasetManifest:
    """Identity-disjoint split. Train side gets ceil(fraction * N) identities,
    clamped so neither side is empty; records are untouched."""
    if not 0.0 < train_fraction < 1.0:
        raise ConfigurationError("train_fraction must be in (0, 1), got %r" % (train_fraction,))
    ids = sorted(manifest.identities)
    if len(ids) < 2:
        raise ConfigurationError("cannot split %d identities into two non-empty sides" % len(ids))
    rng = np.random.default_rng(np.random.SeedSequence((seed, _NS_SPLIT)))
    order = rng.permutation(len(ids))
    n_train = min(math.ceil(train_fraction * len(ids)), len(ids) - 1)
    train_ids = sorted(ids[i] for i in order[:n_train])
    test_ids = sorted(ids[i] for i in order[n_train:])
    return DatasetManifest(
        version=manifest.version,
        image_size=manifest.image_size,
        identities=list(manifest.identities),
        records=list(manifest.records),
        split={"train_ids": train_ids, "test_ids": test_ids},
        root=manifest.root,
    )


def load_image(record: SampleRecord, root) -> torch.Tensor:
    """Image tensor (channels, H, W) with values in [0, 1]."""
    path = Path(root) / record.path
    image = Image.open(path)
    expected_mode = "RGB" if record.modality == VISIBLE else "L"
    if image.mode != expected_mode:
        raise FormatError(
            "%s: PNG mode %s does not match modality %s" % (record.path, image.mode, record.modality)
        )
    array = np.asarray(image, dtype=np.float32) / 255.0
    if array.ndim == 2:
        array = array[None, :, :]
    else:
        array = array.transpose(2, 0, 1)
    return torch.from_numpy(array.copy())


def save_manifest(manifest: DatasetManifest, path):
    payload = {
        "version": manifest.version,
        "image_size": list(manifest.image_size),
        "identities": list(manifest.identities),
        "records": [
            {"path": r.path, "identity": r.identity, "modality": r.modality, "camera": r.camera}
            for r in manifest.records
        ],
        "split": manifest.split,
    }
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    payload = json.loads(path.read_text())
    if payload.get("version") != MANIFEST_VERSION:
        raise FormatError("unsupported manifest version %r" % payload.get("version"))
    records = [
        SampleRecord(r["path"], int(r["identity"]), r["modality"], int(r["camera"]))
        for r in payload["records"]
    ]
    manifest = DatasetManifest(
        version=payload["version"],
        image_size=tuple(payload["image_size"]),
        identities=[int(i) for i in payload["identities"]],
        records=records,
        split=payload.get("split"),
        root=path.parent,
    )
    validate_manifest(manifest)
    return manifest


def validate_manifest(manifest: DatasetManifest, min_per_modality: int = None):
    """Structural invariants; optionally require >= min_per_modality train
    images per identity and modality."""
    known = set(manifest.identities)
    if len(known) != len(manifest.identities):
        raise FormatError("duplicate identity ids in manifest")
    for record in manifest.records:
        if record.identity not in known:
            raise FormatError("record %s references unknown identity %d" % (record.path, record.identity))
        if record.modality not in MODALITIES:
            raise FormatError("record %s has unknown modality %r" % (record.path, record.modality))
    if manifest.split is not None:
        train = set(manifest.split["train_ids"])
        test = set(manifest.split["test_ids"])
        if train & test:
            raise FormatError("train and test identity sets overlap: %s" % sorted(train & test))
        if train | test != known:
            raise FormatError("split does not cover all identities exactly once")
        if min_per_modality is not None:
            counts = {}
            for record in manifest.records:
                if record.identity in train:
                    key = (record.identity, record.modality)
                    counts[key] = counts.get(key, 0) + 1
            for identity in train:
                for modality in MODALITIES:
                    if counts.get((identity, modality), 0) < min_per_modality:
                        raise FormatError(
                            "train identity %d has fewer than %d %s images"
                            % (identity, min_per_modality, modality)
                        )
