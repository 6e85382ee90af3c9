import numpy as np
import pytest

from flatmatch.gradcheck import VARIANTS, check_variant, relative_error, run_gradcheck


def test_relative_error_floor():
    # tiny entries are judged against 1e-3 of the largest one
    a = np.array([1.0, 1e-9])
    n = np.array([1.0, 2e-9])
    assert relative_error(a, n) == pytest.approx(1e-9 / 1e-3)
    assert relative_error(np.zeros(3), np.zeros(3)) == 0.0


@pytest.mark.parametrize("name", VARIANTS)
def test_each_variant_passes(name):
    row = check_variant(name, seed=11)
    assert row.passed, row.max_rel_err


def test_focused_checks_kernel_gradient():
    row = check_variant("focused", seed=0)
    assert set(row.max_rel_err) == {"q", "k", "v", "dw_kernel"}


def test_coarse_step_degrades():
    rows = run_gradcheck(("focused",), seeds=range(3), h=1e-2)
    assert not all(r.passed for r in rows)
    assert max(r.worst for r in rows) > 1e-6
