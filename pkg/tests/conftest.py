"""Fixtures compartilhadas: volumes pequenos e phantoms reduzidos."""

import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from volume_core import Volume  # noqa: E402
from phantom import PhantomSpec, generate_phantom  # noqa: E402

SMALL_SPEC = dict(generations=4, trunk_radius_mm=3.0, trunk_length_mm=16.0, noise_sigma_hu=20.0,
                  psf_sigma_mm=0.0)


def tube_mask(dims=(20, 20, 40), radius=3.0, gap=None, spacing=(1.0, 1.0, 1.0)) -> Volume:
    """Tubo reto ao longo de z; gap=(z0, z1) remove as fatias [z0, z1)."""
    x, y, _ = np.ogrid[:dims[0], :dims[1], :dims[2]]
    cx, cy = (dims[0] - 1) / 2.0, (dims[1] - 1) / 2.0
    disco = (x - cx) ** 2 + (y - cy) ** 2 <= radius * radius
    dados = np.broadcast_to(disco, dims).copy()
    dados[:, :, :2] = False
    dados[:, :, -2:] = False
    if gap is not None:
        dados[:, :, gap[0]:gap[1]] = False
    return Volume(dados.astype(np.uint8), spacing, (0.0, 0.0, 0.0), 'label8')


def tube_ct(mask: Volume) -> Volume:
    ct = np.full(mask.dims, -850, dtype=np.int16)
    ct[mask.data > 0] = -1000
    return Volume(ct, mask.spacing, mask.origin, 'hu16')


@pytest.fixture
def tube():
    return tube_mask()


@pytest.fixture(scope='session')
def small_phantom():
    return generate_phantom(PhantomSpec(seed=0, **SMALL_SPEC))


@pytest.fixture(scope='session')
def small_phantom_b():
    return generate_phantom(PhantomSpec(seed=1, **SMALL_SPEC))
