import pytest

from veinseg.synthgen import VeinSpec, emit_dataset

# Small canvases keep the suite fast; strokes still separate cleanly at 128px.
TINY_SPEC = VeinSpec(canvas=(128, 128), n_secondary=5, n_tertiary_per_secondary=10)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """A complete small dataset: 2 full / 2 partial / 4 unlabeled train leaves
    plus one val and one test leaf, with its manifest."""
    root = tmp_path_factory.mktemp("tiny_dataset")
    manifest = emit_dataset(TINY_SPEC, (2, 2, 4), root, seed=11, n_val=1, n_test=1)
    return manifest


@pytest.fixture(scope="session")
def tiny_patches(tiny_dataset, tmp_path_factory):
    from veinseg.tiling import prepare_patches

    out = tmp_path_factory.mktemp("tiny_patches")
    return prepare_patches(
        tiny_dataset, tiny_dataset.root / "manifest.json", out, patch=64
    )
