from dataclasses import dataclass

import numpy as np
import pytest

from wmprior.grid import Grid2D
from wmprior.pipelines import make_synthetic_benchmark, standardized_sample
from wmprior.solver import BlurKernel, ForwardModel
from wmprior.spde import PrecisionSpec, PriorOperator, image_extension_factor


@dataclass
class Toy:
    grid: Grid2D
    model: ForwardModel
    prior: PriorOperator
    b: np.ndarray
    truth: np.ndarray


def masked_deblur_toy(seed: int = 0, n: int = 16, nu: float = 1.0, ell: float = 0.2,
                      mask_fraction: float = 0.4, noise: float = 0.02, blur_std: float = 1.5) -> Toy:
    """Small masked deblurring problem drawn from its own prior."""
    grid = Grid2D(n, image_extension_factor(nu, ell))
    spec = PrecisionSpec.isotropic(nu, ell, grid)
    blur = BlurKernel(blur_std)
    data, truth = make_synthetic_benchmark(standardized_sample(spec, seed), blur, mask_fraction, noise,
                                           seed + 1, grid)
    model = ForwardModel(grid, data.mask, blur)
    return Toy(grid, model, PriorOperator(spec), data.observed(), truth.values)


@pytest.fixture(scope="session")
def toy() -> Toy:
    return masked_deblur_toy()


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES
    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
