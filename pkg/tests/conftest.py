import numpy as np
import pytest

from xmodal.dataio import DataRepo, SynthConfig, gen_synthetic, load_manifest


def rng_for(seed):
    return np.random.default_rng(np.random.PCG64(seed))


TINY_SINGLE = SynthConfig(seed=101, num_classes=4, images_per_class=6,
                          grid_h=3, grid_w=3, channels=16, object_cells=2,
                          text_dim=24, sketch_dim=32, sketches_per_class=2)

TINY_MULTI = SynthConfig(seed=202, num_classes=3, images_per_class=4,
                         grid_h=3, grid_w=3, channels=16, object_cells=2,
                         multi=True, text_dim=24, sketch_dim=32,
                         sketches_per_class=2)


@pytest.fixture(scope="session")
def tiny_single(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny_single")
    manifest = load_manifest(gen_synthetic(TINY_SINGLE, root))
    return manifest, DataRepo(manifest)


@pytest.fixture(scope="session")
def tiny_multi(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny_multi")
    manifest = load_manifest(gen_synthetic(TINY_MULTI, root))
    return manifest, DataRepo(manifest)
