import pytest
import torch

from fewshot_toon.config import ModelConfig, TrainConfig
from fewshot_toon.model import CartoonGAN
from fewshot_toon.trainer import init_params

torch.set_num_threads(1)

# 16x16 miniature used throughout: two stride-2 downsamplings give 4x4 features
MINI = ModelConfig(img_size=16, ngf=8, ndf=8, n_res=2, disc_layers=2, embed_dim=16)
SMALL = ModelConfig(img_size=32, ngf=8, ndf=8, n_res=2, disc_layers=3, embed_dim=16)


def make_basic(cfg: ModelConfig = MINI, seed: int = 0, dtype=torch.float32) -> CartoonGAN:
    model = CartoonGAN(cfg)
    init_params(model, TrainConfig(seed=seed, crop=cfg.img_size, resize=cfg.img_size))
    return model.to(dtype)


def rand_images(n: int, size: int, seed: int = 0, dtype=torch.float32) -> torch.Tensor:
    gen = torch.Generator().manual_seed(seed)
    return (torch.rand(n, 3, size, size, generator=gen, dtype=dtype) * 2 - 1)


@pytest.fixture
def basic():
    return make_basic()


@pytest.fixture
def basic64():
    return make_basic(dtype=torch.float64)


# criterion number -> (title, passed, detail); filled by the acceptance suite
ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
