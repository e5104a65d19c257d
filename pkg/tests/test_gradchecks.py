import time

import numpy as np
import pytest

from skthdr.autodiff import tensor as T
from skthdr.gradchecks import REGISTRY, TOLERANCE, format_table, gradcheck_suite


@pytest.fixture(scope="module")
def results():
    start = time.perf_counter()
    res = gradcheck_suite()
    return res, time.perf_counter() - start


class TestSuite:
    def test_all_pass(self, results):
        res, _ = results
        failed = [(r.name, r.max_rel_err) for r in res if not r.passed]
        assert not failed
        assert len(res) == len(REGISTRY)

    def test_under_two_minutes(self, results):
        assert results[1] < 120

    def test_covers_every_layer(self):
        for name in ("conv2d", "soft_histogram", "prior_fusion_block", "fpn_fuse", "orm", "spgrm",
                     "skam", "total_objective", "mu_law", "demosaic"):
            assert name in REGISTRY

    def test_table(self, results):
        text = format_table(results[0])
        assert all(r.name in text for r in results[0])

    def test_broken_backward_detected(self, monkeypatch):
        orig = T.Exp.backward

        def wrong(self, g):
            return tuple(1.01 * x if x is not None else None for x in _as_tuple(orig(self, g)))

        monkeypatch.setattr(T.Exp, "backward", wrong)
        (res,) = gradcheck_suite(["exp"])
        assert not res.passed and res.max_rel_err > TOLERANCE

    def test_exceptions_recorded_as_failure(self, monkeypatch):
        def boom(self, g):
            raise RuntimeError("boom")

        monkeypatch.setattr(T.Exp, "backward", boom)
        (res,) = gradcheck_suite(["exp"])
        assert not res.passed and not np.isfinite(res.max_rel_err)


def _as_tuple(x):
    return x if isinstance(x, tuple) else (x,)
