import math

import pytest

from monarchpc.errors import ConfigError
from monarchpc.schedule import (flops_per_apply, memory_elements,
                                monarch_flops, plan_schedule)


def test_even_splits():
    assert plan_schedule(2 ** 18, depth=2).dims == (512, 512)
    assert plan_schedule(2 ** 12, depth=3).dims == (16, 16, 16)
    assert plan_schedule(36, depth=2).dims == (6, 6)


def test_almost_squared_split():
    assert plan_schedule(2 ** 19, depth=2).dims == (512, 1024)
    assert plan_schedule(2 ** 13, depth=3).dims == (16, 16, 32)
    assert plan_schedule(2 ** 15, depth=4).dims == (8, 16, 16, 16)


def test_base_schedules():
    s = plan_schedule(16, base=2)
    assert s.dims == (2, 2, 2, 2) and s.depth == 4
    assert plan_schedule(16, base=4).dims == (4, 4)
    with pytest.raises(ConfigError):
        plan_schedule(24, base=4)


def test_planning_errors():
    with pytest.raises(ConfigError):
        plan_schedule(3, depth=2)
    with pytest.raises(ConfigError):
        plan_schedule(8, depth=4)  # would need a dim of 1
    with pytest.raises(ConfigError):
        plan_schedule(13, depth=2)  # prime


def test_non_power_composites():
    s = plan_schedule(12, depth=2)
    assert s.dims == (3, 4)  # near-equal, larger last


def test_flops_table_cells():
    # dense column is h^2; Monarch columns follow the per-layer edge sums
    expected = {
        (2 ** 12, 2): 524288, (2 ** 12, 3): 196608, (2 ** 12, 4): 131072,
        (2 ** 13, 2): 1572864, (2 ** 13, 3): 524288, (2 ** 13, 4): 327680,
        (2 ** 14, 2): 4194304, (2 ** 14, 3): 1310720, (2 ** 14, 4): 786432,
        (2 ** 15, 2): 12582912, (2 ** 15, 3): 3145728, (2 ** 15, 4): 1835008,
    }
    for h in (2 ** 12, 2 ** 13, 2 ** 14, 2 ** 15):
        assert flops_per_apply(h) == h * h
        for d in (2, 3, 4):
            assert flops_per_apply(plan_schedule(h, depth=d)) == expected[h, d]


def test_flops_endpoints():
    for h in (2 ** 4, 2 ** 6, 2 ** 8):
        assert flops_per_apply(plan_schedule(h, base=2)) == \
            2 * h * int(math.log2(h))
        assert flops_per_apply(plan_schedule(h, depth=2)) == 2 * int(h ** 1.5)


def test_rectangular_flops():
    # one stage: m1*n1*n2, second: m2*n2*m1
    assert monarch_flops((2, 3), (4, 5)) == 4 * 2 * 3 + 5 * 3 * 4


def test_memory_elements():
    assert memory_elements("dense", 2 ** 18, 256, 128) == (2 ** 36, 2 ** 33)
    assert memory_elements("monarch", 2 ** 18, 256, 128, 2) == \
        (2 * 2 ** 27, 2 * 2 ** 33)
    assert memory_elements("monarch", 2 ** 12, 16, 4, 3) == \
        (196608, 3 * 16 * 4096 * 4)
    with pytest.raises(ConfigError):
        memory_elements("dense", 2 ** 10, 256, 0)


def test_hidden_too_small():
    with pytest.raises(ConfigError):
        plan_schedule(2)
