import pytest

from xmreid.datagen import GeneratorConfig, generate_dataset, save_manifest, split_train_test


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """8 identities x 3 images/modality at 24x12; split 4/4."""
    root = tmp_path_factory.mktemp("tiny_ds")
    config = GeneratorConfig(
        num_identities=8, images_per_identity_per_modality=3,
        image_size=(24, 12), stripes=6, noise_level=0.02,
        clutter_probability=0.1, seed=7,
    )
    manifest = generate_dataset(config, root)
    manifest = split_train_test(manifest, 0.5, seed=7)
    save_manifest(manifest, root / "manifest.json")
    return manifest


TINY_MODEL_OVERRIDES = [
    "dataset.num_identities=8",
    "dataset.images_per_identity_per_modality=3",
    "dataset.image_size=[24,12]",
    "sampler.n=4",
    "sampler.m=2",
    "model.stage_channels=[4,8,8,16]",
    "model.graph_dim=4",
    "model.graph_heads=2",
    "train.epochs=2",
    "train.checkpoint_every=0",
]


@pytest.fixture
def tiny_overrides():
    return list(TINY_MODEL_OVERRIDES)
