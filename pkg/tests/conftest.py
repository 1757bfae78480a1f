import numpy as np
import pytest
import torch

from mammnet.config import ModelConfig
from mammnet.datagen import PhantomConfig, generate_cases


TINY = ModelConfig(
    image_size=64,
    num_object_queries=6,
    num_link_queries=4,
    num_vitd_blocks=3,
    num_heads=2,
    embed_dim=16,
    backbone_channels=(8, 16, 16, 32),
    mask_dim=16,
    ffn_dim=32,
)


@pytest.fixture(scope="session")
def tiny_config():
    return TINY


@pytest.fixture(scope="session")
def small_phantom():
    return PhantomConfig(image_size=64, lesion_radius=(4.0, 6.0))


@pytest.fixture(scope="session")
def small_cases(small_phantom):
    return generate_cases(3, small_phantom, 4)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)
    yield


# -- acceptance summary ------------------------------------------------------

_ACCEPTANCE: dict[int, dict] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or (rep.when != "call" and not rep.failed):
        return
    number, title = marker.args
    entry = _ACCEPTANCE.setdefault(number, {"title": title, "ok": True, "details": []})
    entry["ok"] &= rep.passed or rep.skipped
    entry["details"].extend(v for k, v in item.user_properties if k == "detail")


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        entry = _ACCEPTANCE[number]
        status = "PASS" if entry["ok"] else "FAIL"
        detail = f"  [{'; '.join(entry['details'])}]" if entry["details"] else ""
        terminalreporter.write_line(f"criterion {number}: {status}  {entry['title']}{detail}")
