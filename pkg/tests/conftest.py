import numpy as np
import pytest
import torch

from fasteeg.model import FastConfig
from fasteeg.montage import RegionPartition

torch.set_num_threads(1)


def tiny_partition() -> RegionPartition:
    """Six channels in two regions of three."""
    labels = ("Fp1", "F3", "F4", "T7", "T8", "C3")
    return RegionPartition("tiny", ("frontal", "temporal"), (labels[:3], labels[3:]), ((0, 1, 2), (3, 4, 5)), 6)


def tiny_config(**kw) -> FastConfig:
    base = dict(region_sizes=(3, 3), F=4, L_t=2, L_s=1, L=1, heads_spatial=2, heads_temporal=2,
                k_t=5, conv_t_filters=3, k_c=3, pool_window=2, S_max=4, head_hidden=6, dropout=0.0)
    base.update(kw)
    return FastConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
