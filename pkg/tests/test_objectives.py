import json

import numpy as np
import pytest

from skthdr.autodiff import Tensor, backward, gradcheck
from skthdr.config import TrainConfig
from skthdr.domain import mu_law
from skthdr.errors import ShapeMismatch
from skthdr.objectives import (
    FeatureExtractor,
    LossReport,
    LossWeights,
    ObjectiveInputs,
    color_loss,
    content_loss,
    mean_report,
    spg_loss,
    total_objective,
)
from skthdr.skam import SkamStage
from skthdr.train import Arm, Toolkit, _batch, build_dataset, distilled_step, stream


@pytest.fixture(scope="module")
def fx():
    return FeatureExtractor()


def _inputs(rng, H=8, W=8, scale=1.0):
    H_in = Tensor(rng.uniform(0.05, 0.9, size=(1, 3, H, W)), requires_grad=True)
    labels = rng.integers(0, 3, size=(H, W))
    masks = np.stack([labels == k for k in range(4)]).astype(float)[None]
    taps_s = [Tensor(rng.normal(size=(1, 4, 2, 2)), requires_grad=True) for _ in range(3)]
    taps_t = [Tensor(rng.normal(size=(1, 4, 2, 2)), requires_grad=True) for _ in range(3)]
    H_hat = Tensor(rng.uniform(0, 1, size=(1, 3, H, W)), requires_grad=True)
    return H_in, masks, taps_s, taps_t, H_hat


class TestTerms:
    def test_spg_zero_and_offset(self, rng):
        gt = rng.uniform(0.1, 0.5, size=(3, 8, 8))
        t = mu_law(gt).data
        assert spg_loss(t, gt).item() == 0.0
        assert spg_loss(t + 0.01, gt).item() == pytest.approx(0.01, abs=1e-15)

    def test_spg_gradcheck(self, rng):
        gt = rng.uniform(size=(3, 8, 8))
        x = Tensor(rng.uniform(size=(3, 8, 8)))
        assert gradcheck(lambda t: spg_loss(t, gt), x) < 1e-6

    def test_spg_shape(self):
        with pytest.raises(ShapeMismatch):
            spg_loss(np.zeros((3, 4, 4)), np.zeros((3, 8, 8)))

    def test_content_zero_when_equal(self, rng, fx):
        H_in = rng.uniform(size=(3, 8, 8))
        assert content_loss(H_in, mu_law(H_in).data, fx).item() == 0.0

    def test_content_lambda_zero_is_l1(self, rng, fx):
        H_in, H_hat = rng.uniform(size=(2, 3, 8, 8))
        want = np.abs(mu_law(H_in).data - H_hat).mean()
        assert content_loss(H_in, H_hat, fx, lam=0).item() == pytest.approx(want, abs=1e-15)

    def test_content_gradcheck(self, rng, fx):
        x = Tensor(rng.uniform(0.05, 0.9, size=(3, 8, 8)))
        H_hat = rng.uniform(size=(3, 8, 8))
        assert gradcheck(lambda t: content_loss(t, H_hat, fx), x) < 1e-4

    def test_extractor_is_frozen(self, rng, fx):
        x = Tensor(rng.uniform(size=(1, 3, 8, 8)), requires_grad=True)
        sum(t.sum() for t in fx(x)).backward()
        assert all(p.grad is None for p in fx.frozen_tensors())
        assert fx.parameters() == []

    def test_extractor_accepts_weights(self, rng):
        ws = [rng.normal(size=s) for s in [(8, 3, 3, 3), (16, 8, 3, 3), (16, 16, 3, 3), (16, 16, 3, 3)]]
        fx2 = FeatureExtractor(weights=ws)
        np.testing.assert_array_equal(fx2.frozen_tensors()[0].data, ws[0])
        with pytest.raises(ShapeMismatch):
            FeatureExtractor(weights=[w[:1] for w in ws])

    def test_color_teacher_detached(self, rng):
        H_s = Tensor(rng.uniform(size=(2, 3, 8, 8)), requires_grad=True)
        H_hat = Tensor(rng.uniform(size=(2, 3, 8, 8)), requires_grad=True)
        masks = np.ones((2, 1, 8, 8))
        color_loss(H_s, H_hat, masks).backward()
        assert H_hat.grad is None and H_s.grad is not None

    def test_weights_validated(self):
        with pytest.raises(ValueError):
            LossWeights(lambda1=-1)


class TestTotalObjective:
    def test_report_identity(self, rng, fx):
        H_in, masks, taps_s, taps_t, H_hat = _inputs(rng)
        gt = rng.uniform(size=(1, 3, 8, 8))
        stages = [SkamStage(4, 4, 4, rng) for _ in range(3)]
        w = LossWeights()
        out = ObjectiveInputs(H_in, mu_law(H_in), H_hat, gt, masks, taps_s, taps_t)
        total, spg, rep = total_objective(out, w, fx, stages, np.random.default_rng(0))
        assert abs(rep.recompose(w) - rep.total) <= 1e-12
        assert rep.total == total.item() and rep.spg == spg.item()

    def test_all_zero_components(self, fx):
        z = np.zeros((1, 3, 8, 8))
        masks = np.ones((1, 1, 8, 8))
        taps = [np.zeros((1, 3, 2, 2))] * 3
        stages = [SkamStage.identity(3) for _ in range(3)]
        out = ObjectiveInputs(Tensor(z), Tensor(z), Tensor(z), z, masks, taps, taps)
        total, spg, rep = total_objective(out, LossWeights(), fx, stages, np.random.default_rng(0))
        assert total.item() == 0.0 and spg.item() == 0.0
        assert all(getattr(rep, k) == 0.0 for k in ("org", "spg", "content", "color", "feat", "total"))

    def test_detachment(self, rng, fx):
        H_in, masks, taps_s, taps_t, H_hat = _inputs(rng)
        gt = rng.uniform(size=(1, 3, 8, 8))
        stages = [SkamStage(4, 4, 4, rng) for _ in range(3)]
        w = LossWeights()
        out = ObjectiveInputs(H_in, mu_law(H_in), H_hat, gt, masks, taps_s, taps_t)
        total, spg, _, terms = total_objective(out, w, fx, stages, np.random.default_rng(0), return_terms=True)
        distill = w.lambda1 * terms["content"] + w.lambda2 * terms["color"] + terms["feat"]
        backward(distill, retain_graph=True)
        assert H_hat.grad is None and all(t.grad is None for t in taps_t)
        assert H_in.grad is not None
        for t in [H_in] + taps_s:
            t.grad = None
        backward(spg)
        assert H_in.grad is None and all(t.grad is None for t in taps_s)
        assert H_hat.grad is not None

    @pytest.mark.parametrize("c", [2.0, 0.5])
    def test_weight_linearity(self, rng, fx, c):
        H_in, _, _, _, H_hat = _inputs(rng)

        def grad(lam1):
            H_in.grad = None
            (lam1 * content_loss(H_in, H_hat, fx)).backward()
            return H_in.grad.copy()

        np.testing.assert_allclose(grad(c * 1e-3), c * grad(1e-3), rtol=1e-13)

    def test_terms_finite_non_negative(self, rng, fx):
        H_in, masks, taps_s, taps_t, H_hat = _inputs(rng)
        stages = [SkamStage(4, 4, 4, rng) for _ in range(3)]
        out = ObjectiveInputs(H_in, mu_law(H_in), H_hat, rng.uniform(size=(1, 3, 8, 8)), masks, taps_s, taps_t)
        rep = total_objective(out, LossWeights(), fx, stages, np.random.default_rng(0))[2]
        vals = [rep.org, rep.spg, rep.content, rep.color, rep.feat, rep.total]
        assert all(np.isfinite(v) and v >= 0 for v in vals)

    def test_gradcheck(self, rng, fx):
        H_in, masks, taps_s, taps_t, H_hat = _inputs(rng)
        gt = rng.uniform(size=(1, 3, 8, 8))
        stages = [SkamStage(4, 4, 4, rng) for _ in range(3)]
        lat = [(rng.random((1, 4, 2, 2)) < 0.5).astype(float) for _ in range(3)]

        def f(h, *ts):
            out = ObjectiveInputs(h, mu_law(h), H_hat.detach(), gt, masks, list(ts), taps_t)
            return total_objective(out, LossWeights(), fx, stages, masks_latent=lat)[0]

        assert gradcheck(f, [H_in] + taps_s) < 1e-4


class TestDescent:
    def test_one_step_decreases_total(self):
        decreased = 0
        for seed in range(10):
            cfg = TrainConfig(seed=seed, height=16, width=16, n_train=4, n_test=1, batch_size=4)
            ds = build_dataset(cfg)
            arm, kit = Arm("distilled", cfg), Toolkit(cfg)
            batch = _batch(ds, np.arange(4))
            first, _ = distilled_step(arm, batch, ds.train.exposure_times, cfg, kit, stream(seed, "probe"))
            second, _ = distilled_step(arm, batch, ds.train.exposure_times, cfg, kit, stream(seed, "probe"))
            decreased += second.total < first.total
        assert decreased >= 9


class TestReport:
    def test_json_round_trip(self):
        r = LossReport(org=0.1, spg=0.2, content=0.3, color=0.4, feat=0.5, total=0.6, step=3, epoch=1)
        assert LossReport.from_json(r.to_json()) == r
        assert json.loads(r.to_json())["step"] == 3

    def test_mean_report(self):
        rs = [LossReport(org=1.0, total=1.0), LossReport(org=3.0, total=3.0)]
        assert mean_report(rs)["org"] == 2.0
        assert mean_report([])["total"] == 0.0
