import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def render_similar_pair(shape=(512, 768), angle_deg=0.0, scale=1.0, shift=(0.0, 0.0), seed=3):
    """Two views of one scene; view-2 pixel p shows what view 1 shows at H(p).

    Returns ``(img1, fov1, img2, fov2, H)`` with ``H`` mapping image 2 to image 1.
    """
    from fundusreg.geometry import AffineHomography, image_centre
    from fundusreg.synthetic import fundus_scene, render_view

    h, w = shape
    pad = np.array([0.2 * w, 0.2 * h])
    scene = fundus_scene((int(1.4 * h), int(1.4 * w)), seed=seed, unit=h / 1568)
    H = AffineHomography.similarity(np.deg2rad(angle_deg), scale, shift, image_centre(w, h))
    img1, fov1 = render_view(scene, shape, lambda p: p + pad)
    img2, fov2 = render_view(scene, shape, lambda p: H.apply(p) + pad)
    return img1, fov1, img2, fov2, H


# acceptance criteria report one line each; shown at the end of the run
ACCEPTANCE_LINES = []


def record_criterion(number, name, passed, detail):
    line = f"criterion {number} [{'PASS' if passed else 'FAIL'}] {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
