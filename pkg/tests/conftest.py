import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from slideqc import synthgen

settings.register_profile(
    "slideqc",
    deadline=None,
    max_examples=60,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("slideqc")


def flat_patch(rgb, size=224):
    """A size x size x 3 uint8 patch of one solid color."""
    patch = np.empty((size, size, 3), dtype=np.uint8)
    patch[..., 0] = rgb[0]
    patch[..., 1] = rgb[1]
    patch[..., 2] = rgb[2]
    return patch


@pytest.fixture(scope="session")
def tiny_slide_dir(tmp_path_factory):
    """One generated slide carrying all five artifact classes."""
    out = tmp_path_factory.mktemp("slide") / "synth_5"
    spec = synthgen.SynthSpec(
        seed=5,
        width=1568,
        height=1568,
        regions=tuple(synthgen.RegionSpec(k, 0.058) for k in range(1, 6)),
    )
    synthgen.generate_slide(spec, out, slide_id="synth_5")
    return out


@pytest.fixture(scope="session")
def mini_corpus(tmp_path_factory):
    """A three slide corpus: one slide per split."""
    root = tmp_path_factory.mktemp("corpus") / "mini"
    index = synthgen.generate_corpus(root, n_slides=3, seed=11)
    return root, index
