import numpy as np
import pytest
import torch

from activenerf.field import EncodingConfig, FieldConfig, init_params
from activenerf.render import RenderConfig
from activenerf.scene import Primitive, Scene, look_at


def tiny_config(width=8, depth=3, skip=2, uncertainty=True, beta0_sq=0.01, l_pos=2, l_dir=1, **kw):
    return FieldConfig(depth=depth, width=width, skip=skip, encoding=EncodingConfig(l_pos, l_dir, 2.0),
                       uncertainty=uncertainty, beta0_sq=beta0_sq, **kw)


def tiny_pair(seed=0, dtype=torch.float64, **kw):
    """Coarse and fine fields small enough for finite differences."""
    coarse = init_params(seed, tiny_config(uncertainty=False, **kw), dtype)
    fine = init_params(seed + 1, tiny_config(uncertainty=True, **kw), dtype)
    return coarse, fine


def empty_field(model):
    """Make the density head output a huge negative value so sigma is (numerically) zero."""
    with torch.no_grad():
        model.density_head.weight.zero_()
        model.density_head.bias.fill_(-1e4)
    return model


def pin_variance(model, raw=-1e4):
    """Freeze the variance head so every location predicts beta0_sq (plus softplus(raw))."""
    with torch.no_grad():
        model.variance_head.weight.zero_()
        model.variance_head.bias.fill_(raw)
    return model


def small_pose(width=4, height=4, radius=3.0, direction=(1.0, 0.3, 0.4), near=1.5, far=4.5):
    d = np.asarray(direction, dtype=np.float64)
    d /= np.linalg.norm(d)
    return look_at(radius * d, np.zeros(3), focal_length=1.2 * width, width=width, height=height,
                   t_near=near, t_far=far)


@pytest.fixture
def render_cfg():
    return RenderConfig(n_coarse=8, n_fine=8, perturb=False)


@pytest.fixture
def sphere_scene():
    return Scene([Primitive("sphere", [0.0, 0.0, 0.0], 1.0, 2.0, [1.0, 0.0, 0.0])], [0.0, 0.0, 0.0], 1.0)


# one line per acceptance criterion, printed after the run regardless of capture
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
