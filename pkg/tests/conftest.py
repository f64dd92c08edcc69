import pytest
import torch

from glyphsynth.conditioning import ConditioningConfig
from glyphsynth.denoiser import BaseDenoiser, GlyphDenoiser, UNetConfig
from glyphsynth.diffusion import NoiseSchedule
from glyphsynth.glyph_assets import GlyphAtlas

torch.set_num_threads(1)


def tiny_config(dtype_seed: int = 0, canvas: int = 16, T: int = 50) -> UNetConfig:
    cond = ConditioningConfig(text_len=12, cond_dim=16, text_layers=1, text_heads=2, glyph_size=(canvas, canvas),
                              patch=8, fusion_layers=1, fusion_heads=2, seed=dtype_seed)
    return UNetConfig(widths=(8, 16), attn_dim=8, time_dim=16, groups=4, num_timesteps=T, cond=cond, seed=dtype_seed)


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture
def tiny_models(tiny_cfg):
    base = BaseDenoiser(tiny_cfg)
    return base, GlyphDenoiser.from_base(base)


@pytest.fixture
def schedule():
    return NoiseSchedule.linear(50)


@pytest.fixture(scope="session")
def atlas():
    return GlyphAtlas.builtin()


ACCEPTANCE_LINES = []


def record_criterion(name: str, passed: bool, detail: str = "") -> None:
    line = f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
