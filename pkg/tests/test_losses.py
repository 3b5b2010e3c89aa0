import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import central_difference_check
from skelfont import losses, networks
from skelfont.errors import NonFiniteLoss, ShapeMismatch
from skelfont.losses import LossWeights


class StubSg:
    """Duck-typed skeleton translator for loss-contract tests."""

    def __init__(self, fn):
        self.img_to_skel = fn


class MappingDisc:
    """Discriminator stub returning canned patch maps per known input."""

    def __init__(self, pairs):
        self.pairs = pairs

    def __call__(self, img):
        for key, value in self.pairs:
            if img.shape == key.shape and torch.equal(img, key):
                return value, torch.zeros(1)
        raise AssertionError("unexpected discriminator input")


def tiny_setup(seed=0, dtype=torch.float64):
    torch.manual_seed(seed)
    gf = networks.Generator(width=4).to(dtype)
    gb = networks.Generator(width=4).to(dtype)
    d = networks.Discriminator(width=4).to(dtype)
    d_s = networks.Discriminator(width=4, use_attention=False).to(dtype)
    sg = networks.SkeletonTranslator(width=4).to(dtype)
    sg.requires_grad_(False)
    return gf, gb, d, d_s, sg


class TestL1Pixel:
    def test_identical_zero(self):
        a = torch.rand(1, 1, 4, 4)
        assert float(losses.l1_pixel(a, a)) == 0.0

    def test_ones_vs_zeros(self):
        assert float(losses.l1_pixel(torch.ones(2, 3), torch.zeros(2, 3))) == 1.0

    def test_constant_gap(self):
        a = torch.full((4, 4), 0.25)
        b = torch.full((4, 4), 0.75)
        assert float(losses.l1_pixel(a, b)) == pytest.approx(0.5)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            losses.l1_pixel(torch.zeros(2, 2), torch.zeros(2, 3))

    @given(
        st.lists(st.floats(0, 1), min_size=4, max_size=4),
        st.lists(st.floats(0, 1), min_size=4, max_size=4),
        st.lists(st.floats(0, 1), min_size=4, max_size=4),
    )
    @settings(max_examples=50, deadline=None)
    def test_metric_properties(self, xs, ys, zs):
        a, b, c = (torch.tensor(v, dtype=torch.float64) for v in (xs, ys, zs))
        dab = float(losses.l1_pixel(a, b))
        dba = float(losses.l1_pixel(b, a))
        assert dab == pytest.approx(dba)
        assert float(losses.l1_pixel(a, a)) == 0.0
        if dab == 0.0:
            assert torch.allclose(a, b)
        dac = float(losses.l1_pixel(a, c))
        dcb = float(losses.l1_pixel(c, b))
        assert dab <= dac + dcb + 1e-12


class TestSkeletonConsistency:
    def test_identical_inputs_zero(self):
        _, _, _, _, sg = tiny_setup()
        x = torch.rand(1, 1, 8, 8, dtype=torch.float64)
        assert float(losses.skeleton_consistency(sg, x, x.clone())) == 0.0

    def test_constant_translator_collapses(self):
        sg = StubSg(lambda img: torch.full_like(img, 0.5))
        a = torch.rand(1, 1, 8, 8)
        b = torch.rand(1, 1, 8, 8)
        assert float(losses.skeleton_consistency(sg, a, b)) == 0.0

    def test_matches_independent_recompute(self):
        _, _, _, _, sg = tiny_setup(3)
        a = torch.rand(1, 1, 8, 8, dtype=torch.float64)
        b = torch.rand(1, 1, 8, 8, dtype=torch.float64)
        direct = losses.skeleton_consistency(sg, a, b)
        oracle = losses.l1_pixel(networks.sg_forward(sg, a), networks.sg_forward(sg, b))
        assert float(direct) == pytest.approx(float(oracle), abs=1e-12)


class TestCycleLoss:
    def test_identity_maps_zero(self):
        gf = lambda img, skel: img  # noqa: E731
        gb = lambda img, skel: img  # noqa: E731
        sg = StubSg(lambda img: img)
        x = torch.rand(1, 1, 4, 4)
        y = torch.rand(1, 1, 4, 4)
        assert float(losses.cycle_loss(gf, gb, sg, x, x, y, y)) == 0.0

    def test_nonnegative(self):
        gf, gb, _, _, sg = tiny_setup(1)
        x, xs = torch.rand(2, 1, 1, 8, 8, dtype=torch.float64)
        y, ys = torch.rand(2, 1, 1, 8, 8, dtype=torch.float64)
        assert float(losses.cycle_loss(gf, gb, sg, x, xs, y, ys)) >= 0.0

    def test_matches_hand_composition(self):
        gf, gb, _, _, sg = tiny_setup(2)
        x, xs = torch.rand(2, 1, 1, 8, 8, dtype=torch.float64)
        y, ys = torch.rand(2, 1, 1, 8, 8, dtype=torch.float64)
        got = losses.cycle_loss(gf, gb, sg, x, xs, y, ys)
        fake_y = gf(x, xs)
        fake_x = gb(y, ys)
        want = losses.l1_pixel(gb(fake_y, networks.sg_forward(sg, fake_y)), x) + \
            losses.l1_pixel(gf(fake_x, networks.sg_forward(sg, fake_x)), y)
        assert float(got) == pytest.approx(float(want), abs=1e-12)


class TestClsLoss:
    def test_confident_correct_near_zero(self):
        assert float(losses.cls_loss(torch.tensor(30.0), "target")) < 1e-12

    def test_uncertain_is_ln2(self):
        for label in ("source", "target"):
            assert float(losses.cls_loss(torch.tensor(0.0), label)) == pytest.approx(
                math.log(2), rel=1e-6
            )

    def test_closed_form(self):
        got = float(losses.cls_loss(torch.tensor(2.0), 1))
        assert got == pytest.approx(math.log(1 + math.exp(-2)), rel=1e-6)


class TestAdvImage:
    def _pair(self):
        real = torch.rand(1, 1, 4, 4)
        fake = torch.rand(1, 1, 4, 4)
        return real, fake

    def test_perfect_discriminator_zero(self):
        real, fake = self._pair()
        d = MappingDisc([(real, torch.ones(1, 1, 2, 2)), (fake, torch.zeros(1, 1, 2, 2))])
        assert float(losses.adv_image(d, real, fake, "discriminator")) == 0.0

    def test_half_everywhere(self):
        real, fake = self._pair()
        half = torch.full((1, 1, 2, 2), 0.5)
        d = MappingDisc([(real, half), (fake, half)])
        assert float(losses.adv_image(d, real, fake, "discriminator")) == pytest.approx(0.5)

    def test_generator_optimum(self):
        real, fake = self._pair()
        d = MappingDisc([(fake, torch.ones(1, 1, 2, 2))])
        assert float(losses.adv_image(d, real, fake, "generator")) == 0.0

    def test_bce_form(self):
        real, fake = self._pair()
        zero_logits = torch.zeros(1, 1, 2, 2)
        d = MappingDisc([(real, zero_logits), (fake, zero_logits)])
        got = float(losses.adv_image(d, real, fake, "discriminator", form="bce"))
        assert got == pytest.approx(2 * math.log(2), rel=1e-6)

    def test_discriminator_side_detaches_fake(self):
        _, _, d, _, _ = tiny_setup(4)
        gen_out = torch.rand(1, 1, 8, 8, dtype=torch.float64, requires_grad=True)
        loss = losses.adv_image(d, torch.rand(1, 1, 8, 8, dtype=torch.float64), gen_out,
                                "discriminator")
        loss.backward()
        assert gen_out.grad is None or float(gen_out.grad.abs().max()) == 0.0


class TestAdvSkeleton:
    def test_identical_inputs_shared_score(self):
        _, _, _, d_s, sg = tiny_setup(5)
        y = torch.rand(1, 1, 8, 8, dtype=torch.float64)
        loss = losses.adv_skeleton(d_s, sg, y, y.clone(), "discriminator")
        sk = networks.sg_forward(sg, y)
        s, _ = d_s(sk)
        want = float(((s - 1) ** 2).mean() + (s**2).mean())
        assert float(loss) == pytest.approx(want, abs=1e-10)

    def test_reduces_to_adv_image_over_sg(self):
        _, _, _, d_s, sg = tiny_setup(6)
        y = torch.rand(1, 1, 8, 8, dtype=torch.float64)
        g = torch.rand(1, 1, 8, 8, dtype=torch.float64)
        for side in ("generator", "discriminator"):
            got = losses.adv_skeleton(d_s, sg, y, g, side)
            want = losses.adv_image(
                d_s, networks.sg_forward(sg, y), networks.sg_forward(sg, g), side
            )
            assert float(got) == pytest.approx(float(want), abs=1e-12)


class TestTotalObjective:
    def test_all_zero(self):
        bd = losses.total_objective(LossWeights())
        assert bd.total == 0.0

    def test_published_weights_sum(self):
        w = LossWeights(5, 10, 100, 10)
        bd = losses.total_objective(w, pix=1, sc=0, cycle=1, cls=1, adv_i=1, adv_s=0)
        assert bd.total == 125.0

    def test_doubling_weights_doubles_total(self):
        w = LossWeights(5, 10, 100, 10)
        w2 = LossWeights(10, 20, 200, 20)
        parts = dict(pix=0.3, sc=0.1, cycle=0.7, cls=0.2, adv_i=0.4, adv_s=0.6)
        assert losses.total_objective(w2, **parts).total == pytest.approx(
            2 * losses.total_objective(w, **parts).total, rel=1e-12
        )

    @given(st.floats(0, 50), st.floats(0, 50))
    @settings(max_examples=30, deadline=None)
    def test_linear_in_each_lambda(self, lam, other):
        parts = dict(pix=0.2, sc=0.4, cycle=0.5, cls=0.3, adv_i=0.7, adv_s=0.1)
        base = losses.total_objective(LossWeights(0, other, other, other), **parts).total
        lifted = losses.total_objective(LossWeights(lam, other, other, other), **parts).total
        assert lifted - base == pytest.approx(lam * (parts["adv_i"] + parts["adv_s"]), rel=1e-9, abs=1e-9)

    def test_invariant_composition(self):
        w = LossWeights(2, 3, 4, 5)
        parts = dict(pix=0.11, sc=0.22, cycle=0.33, cls=0.44, adv_i=0.55, adv_s=0.66)
        bd = losses.total_objective(w, **parts)
        assert bd.total == pytest.approx(
            w.lambda1 * (parts["adv_i"] + parts["adv_s"])
            + w.lambda2 * parts["cycle"]
            + w.lambda3 * parts["cls"]
            + w.lambda4 * (parts["pix"] + parts["sc"]),
            rel=1e-15,
        )

    def test_nonfinite_aborts(self):
        with pytest.raises(NonFiniteLoss):
            losses.total_objective(LossWeights(), pix=float("nan"))
        with pytest.raises(NonFiniteLoss):
            losses.total_objective(LossWeights(), cycle=torch.tensor(float("inf")))

    def test_tensor_total_backpropagates(self):
        x = torch.tensor(0.4, requires_grad=True)
        bd = losses.total_objective(LossWeights(1, 1, 1, 1), pix=x)
        bd.total.backward()
        assert float(x.grad) == 1.0


class TestLossGradients:
    """Finite-difference agreement for every term w.r.t. generator params."""

    def setup_method(self):
        torch.manual_seed(11)
        self.gf, self.gb, self.d, self.d_s, self.sg = tiny_setup(11)
        self.x = torch.rand(1, 1, 8, 8, dtype=torch.float64)
        self.xs = torch.rand(1, 1, 8, 8, dtype=torch.float64)
        self.y = torch.rand(1, 1, 8, 8, dtype=torch.float64)
        self.ys = torch.rand(1, 1, 8, 8, dtype=torch.float64)
        self.params = list(self.gf.parameters())

    def test_pix_term(self):
        central_difference_check(
            lambda: losses.l1_pixel(self.gf(self.x, self.xs), self.y),
            self.params, max_coords=4,
        )

    def test_sc_term(self):
        central_difference_check(
            lambda: losses.skeleton_consistency(self.sg, self.gf(self.x, self.xs), self.y),
            self.params, max_coords=4,
        )

    def test_cycle_term(self):
        central_difference_check(
            lambda: losses.cycle_loss(self.gf, self.gb, self.sg,
                                      self.x, self.xs, self.y, self.ys),
            self.params[:30], max_coords=3,
        )

    def test_cls_term(self):
        central_difference_check(
            lambda: sum(losses.cls_loss(lg, "source")
                        for lg in self.gf.domain_logits(self.x, self.xs)),
            self.params, max_coords=4,
        )

    def test_adv_image_generator_side(self):
        central_difference_check(
            lambda: losses.adv_image(self.d, self.y, self.gf(self.x, self.xs), "generator"),
            self.params, max_coords=4,
        )

    def test_adv_skeleton_generator_side(self):
        central_difference_check(
            lambda: losses.adv_skeleton(self.d_s, self.sg, self.y,
                                        self.gf(self.x, self.xs), "generator"),
            self.params, max_coords=4,
        )
