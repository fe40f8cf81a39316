import numpy as np
import pytest
import torch

from e2fnet.data import SyntheticSpec, generate_synthetic, load_pairs
from e2fnet.model import ArchitectureConfig

torch.set_num_threads(1)


def tiny_arch(**overrides) -> ArchitectureConfig:
    """The small geometry used for gradient checks (T=2, C=3, F=17, N=8, D=2, W=H=8)."""
    base = dict(input_t=2, input_c=3, input_f=17, feature_depth=8, out_d=2, out_w=8, out_h=8,
                encoder_depths=(4, 8, 8))
    base.update(overrides)
    return ArchitectureConfig(**base)


def synth_arch(n: int = 16, channels: int = 8) -> ArchitectureConfig:
    return ArchitectureConfig(input_c=channels, out_d=4, out_w=16, out_h=16, feature_depth=n,
                              encoder_depths=(n // 2, n, n))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    spec = SyntheticSpec(n_subjects=3, volumes_per_subject=25, geometry=(20, 8, 249, 4, 16, 16), seed=3)
    manifest = generate_synthetic(spec, root)
    return manifest, load_pairs(manifest, manifest.subject_ids)


ACCEPTANCE_RESULTS: dict[str, tuple[bool, str]] = {}


@pytest.fixture
def acceptance():
    def record(criterion: str, ok: bool, detail: str = "") -> bool:
        ACCEPTANCE_RESULTS[criterion] = (bool(ok), detail)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[name]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")
