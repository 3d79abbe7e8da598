import pytest

from freeedit.model import ModelConfig
from freeedit.scene import generate_synthetic_scene
from freeedit.trainer import TrainConfig


def tiny_model_config(**kw) -> ModelConfig:
    base = dict(token_dim=8, dim=8, edit_heads=2, edit_ffn=16, n_self=1, n_cross=1, epi_heads=2, epi_ffn=16,
                n_stage1=1, n_stage2=1, ray_heads=2, ray_ffn=16, n_ray_blocks=1, rgb_hidden=8,
                density_hidden=4, n_freqs=2, n_epipolar=1, encoder_widths=(4, 4))
    base.update(kw)
    return ModelConfig(**base)


def tiny_train_config(**kw) -> TrainConfig:
    base = dict(iters=20, rays_per_batch=8, scenes_per_batch=2, m_lo=2, m_hi=2, n_points=8, warmup_iters=2,
                con_start_iter=3, model=tiny_model_config())
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def tiny_scenes():
    return [generate_synthetic_scene(s, 8, 32) for s in (0, 1)]


@pytest.fixture(scope="session")
def tiny_model_cfg():
    return tiny_model_config


@pytest.fixture(scope="session")
def tiny_train_cfg():
    return tiny_train_config


_CRITERIA: dict[int, str] = {}


@pytest.fixture(scope="session")
def criterion():
    """Record one PASS/FAIL line per acceptance criterion; printed in the terminal summary."""

    def report(number: int, title: str, passed: bool, detail: str = "") -> bool:
        line = f"criterion {number:>2}  {'PASS' if passed else 'FAIL'}  {title}"
        _CRITERIA[number] = line + (f"  ({detail})" if detail else "")
        print(_CRITERIA[number])
        return passed

    return report


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])
