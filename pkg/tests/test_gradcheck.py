import pytest

from flow_align.gradcheck import LOSSES, check_one, relative_error, run_gradcheck


def test_relative_error():
    assert relative_error(1.0, 1.0) == 0.0
    assert relative_error(2.0, 1.0) == 0.5
    assert relative_error(0.0, 1e-12) == pytest.approx(1e-4)


def test_every_loss_covered():
    report = run_gradcheck(8)
    assert {c["loss"] for c in report["cases"]} == set(LOSSES)
    assert report["max_rel_error"] < 1e-5


def test_check_is_reproducible():
    assert check_one("grpo", 3) == check_one("grpo", 3)
