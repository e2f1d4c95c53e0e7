import math

import mpmath
import pytest
import torch

from gtrmamba import manifold as M
from gtrmamba.errors import NumericError
from gtrmamba.gtr_ssm import TAYLOR_SWITCH, GTRLayer, discretize, fixed_decay, scan, stack

D, D_CTX = 8, 5
F64 = dict(dtype=torch.float64)


def inputs(gen, L, batch=(), scale=1.0):
    q = M.exp_o(scale * torch.randn(*batch, L, D, generator=gen, **F64))
    u = torch.randn(*batch, L, D_CTX, generator=gen, **F64)
    gamma = torch.rand(*batch, L, generator=gen, **F64) * 0.9 + 0.05
    return q, u, gamma


def randomized_layer(seed=0):
    layer = GTRLayer(D, D_CTX, seed=seed)
    g = torch.Generator().manual_seed(seed + 100)
    with torch.no_grad():
        for p in layer.parameters():
            p.add_(0.3 * torch.randn(p.shape, generator=g, **F64))
    return layer


class TestDiscretize:
    def test_half_decay_cell(self):
        a = torch.tensor([-math.log(2)], **F64)
        a_bar, b_bar = discretize(torch.ones(1, **F64), a)
        assert a_bar.item() == pytest.approx(0.5, abs=1e-15)
        assert b_bar.item() == pytest.approx(0.721348, abs=1e-6)
        assert b_bar.item() == pytest.approx(0.5 / math.log(2), abs=1e-15)

    def test_zero_channel(self):
        dt = torch.tensor([0.3, 1.7, 5.0], **F64)
        a_bar, b_bar = discretize(dt, torch.zeros(3, **F64))
        assert torch.equal(a_bar, torch.ones(3, **F64))
        assert torch.equal(b_bar, dt)

    def test_branch_continuity(self):
        a = torch.tensor([-1.0], **F64)
        below = torch.tensor([TAYLOR_SWITCH * (1 - 1e-12)], **F64)
        above = torch.tensor([TAYLOR_SWITCH * (1 + 1e-12)], **F64)
        _, b_lo = discretize(below, a)
        _, b_hi = discretize(above, a)
        assert abs(b_hi.item() - b_lo.item()) <= 1e-12

    def test_taylor_matches_exact_at_switch(self):
        dt = TAYLOR_SWITCH * 0.999999
        with mpmath.workdps(40):
            exact = float(-mpmath.expm1(-mpmath.mpf(dt)))
        _, b = discretize(torch.tensor([dt], **F64), torch.tensor([-1.0], **F64))
        assert b.item() == pytest.approx(exact, rel=1e-12)

    def test_nonpositive_step(self):
        with pytest.raises(NumericError):
            discretize(torch.tensor([0.0], **F64), torch.tensor([-1.0], **F64))

    def test_decay_range(self, gen):
        a_bar, _ = discretize(torch.rand(100, D, generator=gen, **F64) * 10 + 1e-9, fixed_decay(D))
        assert ((a_bar > 0) & (a_bar <= 1)).all()


class TestStepSize:
    def test_zero_preactivation(self):
        layer = GTRLayer(D, D_CTX)
        with torch.no_grad():
            for p in (layer.A_proj.weight, layer.A_proj.bias, layer.dt_bias):
                p.zero_()
        dt = layer.step_size(torch.randn(D_CTX, **F64), torch.tensor(0.4, **F64))
        assert torch.allclose(dt, torch.full((D,), math.log(2) * 0.4, **F64), atol=1e-15)

    def test_linear_in_gamma(self, gen):
        layer = randomized_layer()
        u = torch.randn(3, D_CTX, generator=gen, **F64)
        g = torch.rand(3, generator=gen, **F64) * 0.4
        assert torch.equal(layer.step_size(u, 2 * g), 2 * layer.step_size(u, g))

    def test_vanishing_gamma(self, gen):
        layer = randomized_layer()
        dt = layer.step_size(torch.randn(D_CTX, generator=gen, **F64), torch.tensor(1e-12, **F64))
        assert (dt > 0).all() and (dt < 1e-10).all()


class TestModulate:
    def test_gate_off(self):
        layer = GTRLayer(D, D_CTX)
        with torch.no_grad():
            layer.C_proj.weight.zero_()
            layer.C_proj.bias.fill_(-1e4)
        out = layer.modulate_input(torch.ones(D, **F64), torch.randn(D_CTX, **F64))
        assert out.abs().max().item() < 1e-300

    def test_half_gate(self):
        layer = GTRLayer(D, D_CTX)
        with torch.no_grad():
            for p in (layer.B_proj.weight, layer.C_proj.weight, layer.C_proj.bias):
                p.zero_()
        b = torch.arange(1.0, D + 1, **F64)
        assert torch.equal(layer.modulate_input(b, torch.randn(D_CTX, **F64)), 0.5 * b)

    def test_three_factor_product(self, gen):
        layer = randomized_layer()
        b, u = torch.rand(D, generator=gen, **F64), torch.randn(D_CTX, generator=gen, **F64)
        ref = b * (layer.B_proj.weight @ u + layer.B_proj.bias) * torch.sigmoid(layer.C_proj.weight @ u + layer.C_proj.bias)
        assert torch.allclose(layer.modulate_input(b, u), ref, atol=1e-15)


def mp_oracle(layer, q, u, gamma):
    """Independent unrolled evaluation of the recurrence and output map at 50 digits."""
    P = lambda t: [[mpmath.mpf(float(x)) for x in row] for row in t.detach().reshape(-1, t.shape[-1]).tolist()] \
        if t.dim() > 1 else [mpmath.mpf(float(x)) for x in t.detach().tolist()]
    WA, bA = P(layer.A_proj.weight), P(layer.A_proj.bias)
    WB, bB = P(layer.B_proj.weight), P(layer.B_proj.bias)
    WC, bC = P(layer.C_proj.weight), P(layer.C_proj.bias)
    dtw, dtb, anchor, Wout = P(layer.dt_weight), P(layer.dt_bias), P(layer.bias_anchor), P(layer.out_weight)
    mv = lambda W, b, x: [sum(W[i][j] * x[j] for j in range(len(x))) + b[i] for i in range(len(W))]
    norm = lambda v: mpmath.sqrt(sum(x * x for x in v))

    def exp_ball(v):  # tangent vector -> Poincaré ball coordinates
        n = norm(v)
        return [mpmath.tanh(n / 2) * x / n for x in v] if n else [mpmath.mpf(0)] * len(v)

    def mob(x, y):
        xy, x2, y2 = sum(a * b for a, b in zip(x, y)), sum(a * a for a in x), sum(b * b for b in y)
        den = 1 + 2 * xy + x2 * y2
        return [((1 + 2 * xy + y2) * a + (1 - x2) * b) / den for a, b in zip(x, y)]

    def ball_to_lorentz(p):
        s = sum(a * a for a in p)
        return [(1 + s) / (1 - s)] + [2 * a / (1 - s) for a in p]

    def lorentz_to_ball(x):
        return [a / (1 + x[0]) for a in x[1:]]

    anc = exp_ball(anchor)
    h = [mpmath.mpf(0)] * D
    hs, Hs = [], []
    for t in range(q.shape[0]):
        uc, g = P(u[t]), mpmath.mpf(float(gamma[t]))
        x = P(q[t])
        sn = norm(x[1:])
        logq = [mpmath.acosh(x[0]) * c / sn for c in x[1:]] if sn else [mpmath.mpf(0)] * D
        pre, Bv, Cv = mv(WA, bA, uc), mv(WB, bB, uc), mv(WC, bC, uc)
        for k in range(D):
            a = -mpmath.log(k + 1)
            dt = mpmath.log1p(mpmath.exp(pre[k] * dtw[k] + dtb[k])) * g
            abar = mpmath.exp(dt * a)
            bbar = (abar - 1) / a if a != 0 else dt
            h[k] = abar * h[k] + bbar * Bv[k] / (1 + mpmath.exp(-Cv[k])) * logq[k]
        hs.append(list(h))
        Hs.append(mob(exp_ball(h), anc))
    E = []
    prev = mob([mpmath.mpf(0)] * D, anc)
    for H in Hs:
        L = ball_to_lorentz(H)
        sp = [sum(Wout[i][j] * L[1 + j] for j in range(D)) for i in range(D)]
        lin = lorentz_to_ball([mpmath.sqrt(1 + sum(s * s for s in sp))] + sp)
        E.append(ball_to_lorentz(mob(prev, lin)))
        prev = H
    return hs, E


class TestScan:
    def test_extended_precision_oracle(self, gen):
        layer = randomized_layer(seed=3)
        q, u, gamma = inputs(gen, 6)
        E, aux = scan(layer, q, u, gamma, return_aux=True)
        with mpmath.workdps(50):
            hs, E_ref = mp_oracle(layer, q, u, gamma)
            h_ref = torch.tensor([[float(x) for x in row] for row in hs], **F64)
            E_ref = torch.tensor([[float(x) for x in row] for row in E_ref], **F64)
        rel = lambda a, b: ((a - b).abs().max() / b.abs().max()).item()
        assert rel(aux["h"], h_ref) < 1e-10
        assert rel(E, E_ref) < 1e-10

    def test_zero_inputs_fixed_point(self, gen):
        layer = GTRLayer(D, D_CTX)
        _, u, gamma = inputs(gen, 5)
        q = M.origin(D).expand(5, D + 1)
        E, aux = layer(q, u, gamma, return_aux=True)
        assert torch.equal(aux["h"], torch.zeros(5, D, **F64))
        assert torch.allclose(aux["H"], q, atol=0)
        assert torch.allclose(E, q, atol=1e-15)

    def test_single_step_closed_form(self, gen):
        layer = randomized_layer()
        q, u, gamma = inputs(gen, 1)
        _, aux = layer(q, u, gamma, return_aux=True)
        a_bar, b_bar = discretize(layer.step_size(u, gamma), layer.a)
        expected = layer.modulate_input(b_bar, u) * M.log_o(q)
        assert torch.allclose(aux["h"], expected, atol=1e-15)

    def test_on_manifold_long(self, gen):
        layer = randomized_layer()
        q, u, gamma = inputs(gen, 512, scale=2.0)
        E, aux = layer(q, u, gamma, return_aux=True)
        M.check_on_manifold(aux["H"])
        M.check_on_manifold(E)

    def test_zero_input_state_nonincreasing(self, gen):
        layer = randomized_layer()
        q, u, gamma = inputs(gen, 12)
        q = torch.cat([q[:3], M.origin(D).expand(9, D + 1)])
        _, aux = layer(q, u, gamma, return_aux=True)
        peak = aux["h"][2:].abs().max(-1).values
        assert (peak[1:] <= peak[:-1]).all()

    def test_causal(self, gen):
        layer = randomized_layer()
        q, u, gamma = inputs(gen, 8)
        u2 = u.clone()
        u2[5:] = 0
        assert torch.equal(layer(q, u, gamma)[:5], layer(q, u2, gamma)[:5])

    def test_batched_equals_single(self, gen):
        layer = randomized_layer()
        q, u, gamma = inputs(gen, 6, batch=(3,))
        full = layer(q, u, gamma)
        for b in range(3):
            assert torch.allclose(full[b], layer(q[b], u[b], gamma[b]), atol=1e-14)

    def test_nonfinite_state_reports_step(self, gen):
        layer = GTRLayer(D, D_CTX)
        q, u, gamma = inputs(gen, 4)
        q[2, 1] = float("nan")
        with pytest.raises(NumericError, match="step 2"):
            layer(q, u, gamma)


class TestStack:
    def test_one_layer_equals_scan(self, gen):
        layer = randomized_layer()
        q, u, gamma = inputs(gen, 5)
        assert torch.equal(stack([layer], q, u, gamma), scan(layer, q, u, gamma))

    def test_degenerate_second_layer(self, gen):
        first = randomized_layer()
        second = GTRLayer(D, D_CTX)
        with torch.no_grad():
            second.C_proj.weight.zero_()
            second.C_proj.bias.fill_(-1e4)
        q, u, gamma = inputs(gen, 5)
        out = stack([first, second], q, u, gamma)
        # zero input -> H_t = o, so E_t = o (+) LorentzLinear(o) = o
        assert torch.allclose(out, M.origin(D).expand_as(out), atol=1e-12)

    def test_deterministic(self, gen):
        q, u, gamma = inputs(gen, 5)
        a = stack([GTRLayer(D, D_CTX, seed=i) for i in range(2)], q, u, gamma)
        b = stack([GTRLayer(D, D_CTX, seed=i) for i in range(2)], q, u, gamma)
        assert torch.equal(a, b)

    def test_needs_a_layer(self, gen):
        with pytest.raises(ValueError):
            stack([], *inputs(gen, 2))
