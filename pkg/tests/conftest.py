import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from makeup3d.face3d import FacePose, UVLayout, UVUnwrapConfig, toy_model, unwrap_uv  # noqa: E402

torch.set_num_threads(1)


class ToyGeometry:
    def __init__(self, model, resolution):
        self.model = model
        self.config = UVUnwrapConfig.fit(model.mean_shape, resolution)
        self.uv = unwrap_uv(model.mean_shape, self.config)
        self.layout = UVLayout(self.uv, model.triangles, resolution)
        self.triangles = model.triangles
        self.shape = model.mean_shape


@pytest.fixture(scope="session")
def toy64():
    return ToyGeometry(toy_model(), 64)


@pytest.fixture(scope="session")
def small_mesh():
    # 14 x 16 quads -> 448 triangles
    return ToyGeometry(toy_model(n_rows=15, n_cols=17), 64)


@pytest.fixture
def frontal_pose():
    return FacePose(scale_f=25.0, translation_2d=[32.0, 32.0])


def smooth_texture(res, coverage):
    r, c = np.mgrid[0:res, 0:res] / res
    tex = np.stack([0.5 + 0.3 * np.sin(2 * r + 1.0),
                    0.5 + 0.3 * np.cos(2.5 * c),
                    0.4 + 0.2 * np.sin(1.5 * (r + c))], axis=-1)
    return tex * coverage[..., None]


@pytest.fixture(scope="session")
def toy_data(tmp_path_factory):
    """Default toy dataset, generated once per session."""
    from makeup3d.data import ToyFaceSpec, generate_toy_dataset

    root = tmp_path_factory.mktemp("toy")
    generate_toy_dataset(ToyFaceSpec(seed=0), root)
    return root


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.REPORT:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.REPORT):
        terminalreporter.write_line(mod.REPORT[n])
