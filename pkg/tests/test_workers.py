import math

import numpy as np
import pytest
import torch

from helpers import ade_loop, directional_gradcheck, fde_loop, mse_loop
from mwtraj.core_types import InvalidInputError
from mwtraj.workers import (RecurrentWorker, SeriesWorker, TransformerWorker, ade,
                            apply_step_constraint, batch_loss, build_worker, constrain_steps, fde,
                            loss_matrix, mse, per_worker_losses)


# -- step constraint ---------------------------------------------------------------

def test_constraint_worked_example():
    nxt = apply_step_constraint((0, 0), (3, 4), 10)
    np.testing.assert_allclose(nxt, [5.959842894454291, 7.946457192605721], rtol=1e-12)
    assert np.linalg.norm(nxt) == pytest.approx(9.933071490757151, abs=1e-12)


def test_constraint_zero_and_tiny_raw_stays_put():
    np.testing.assert_array_equal(apply_step_constraint((2, -1), (0, 0), 3), [2, -1])
    np.testing.assert_array_equal(apply_step_constraint((2, -1), (1e-10, 0), 3), [2, -1])


def test_constraint_asymptote_below_max():
    lengths = [np.linalg.norm(apply_step_constraint((0, 0), (r, 0), 2.0)) for r in (1, 10, 100, 1e6)]
    # non-decreasing up to last-ulp rounding once sigmoid saturates
    assert all(a <= b * (1 + 1e-15) for a, b in zip(lengths, lengths[1:]))
    assert all(l < 2.0 for l in lengths)
    assert lengths[-1] == pytest.approx(2.0, rel=1e-12)


def test_constraint_errors():
    with pytest.raises(InvalidInputError):
        apply_step_constraint((0, 0), (np.inf, 0), 1)
    with pytest.raises(InvalidInputError):
        apply_step_constraint((0, 0), (1, 0), 0)


def test_torch_constraint_matches_numpy():
    raw = torch.tensor([[3.0, 4.0], [0.0, 0.0], [1e-3, -2e-3], [1e5, 1e5]], dtype=torch.float64)
    steps = constrain_steps(raw, 10.0).numpy()
    for r, s in zip(raw.numpy(), steps):
        np.testing.assert_allclose(s, apply_step_constraint((0, 0), r, 10.0), rtol=1e-12, atol=0)
    assert (np.linalg.norm(steps, axis=1) < 10).all()


def test_torch_constraint_float32_saturation_stays_below_cap():
    raw = torch.tensor([[1e6, 0.0], [1e30, -1e30]], dtype=torch.float32)
    assert (torch.linalg.norm(constrain_steps(raw, 1.0), dim=-1) < 1.0).all()


def test_constraint_gradient_finite_at_zero():
    raw = torch.zeros(3, 2, requires_grad=True)
    constrain_steps(raw, 1.0).sum().backward()
    assert torch.isfinite(raw.grad).all()


# -- losses ------------------------------------------------------------------------

def test_ade_examples():
    ty = [(0, 0), (1, 0)]
    assert ade(ty, ty) == 0
    assert ade(ty, [(0, 1), (1, 1)]) == 1.0
    assert ade([(0, 0)], [(3, 4)]) == 5.0


def test_fde_examples():
    assert fde([(0, 0), (5, 5)], [(9, 9), (5, 5)]) == 0
    assert fde([(0, 0), (1, 0)], [(0, 1), (1, 1)]) == 1.0
    assert fde([(0, 0)], [(3, 4)]) == ade([(0, 0)], [(3, 4)])


def test_mse_examples():
    assert mse([1.5, 2.0], [1.5, 2.0]) == 0
    assert mse([0, 0], [1, 3]) == 5.0
    y = np.array([0.5, -1.0, 2.0])
    assert mse(y, y + 0.3) == pytest.approx(0.09, rel=1e-12)


def test_loss_errors():
    with pytest.raises(InvalidInputError):
        ade([(0, 0)], [(0, 0), (1, 1)])
    with pytest.raises(InvalidInputError):
        fde([(0, 0, 0)], [(0, 0, 0)])
    with pytest.raises(InvalidInputError):
        mse([1, 2], [1])


def test_losses_against_loops():
    rng = np.random.default_rng(3)
    for _ in range(50):
        n = rng.integers(1, 8)
        a, b = rng.normal(size=(n, 2)) * 5, rng.normal(size=(n, 2)) * 5
        assert ade(a, b) == pytest.approx(ade_loop(a, b), rel=1e-12)
        assert fde(a, b) == pytest.approx(fde_loop(a, b), rel=1e-12)
        assert mse(a, b) == pytest.approx(mse_loop(a, b), rel=1e-12)


def test_batch_loss_matches_numpy():
    rng = np.random.default_rng(4)
    a, b = rng.normal(size=(6, 5, 2)), rng.normal(size=(6, 5, 2))
    ta, tb = torch.tensor(a), torch.tensor(b)
    np.testing.assert_allclose(batch_loss("ade", tb, ta).numpy(), [ade(x, y) for x, y in zip(a, b)])
    np.testing.assert_allclose(batch_loss("fde", tb, ta).numpy(), [fde(x, y) for x, y in zip(a, b)])
    np.testing.assert_allclose(batch_loss("mse", tb, ta).numpy(), [mse(x, y) for x, y in zip(a, b)])


# -- workers -----------------------------------------------------------------------

def _tx(b=4, lx=6, units=2, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.cumsum(torch.randn(b, lx, 2 * units, generator=g), dim=1)


@pytest.mark.parametrize("cls", [TransformerWorker, RecurrentWorker])
def test_predict_shape_and_step_bound(cls):
    torch.manual_seed(0)
    w = cls(n_units=2, horizon=5, max_step=0.7, d_model=16, n_heads=2, n_layers=1)
    tx = _tx()
    out = w.predict(tx, torch.tensor([0, 1, 0, 1]))
    assert out.shape == (4, 5, 2)
    origin = tx[torch.arange(4), -1].view(4, 2, 2)[torch.arange(4), torch.tensor([0, 1, 0, 1])]
    chain = torch.cat([origin.unsqueeze(1), out], dim=1)
    assert (torch.linalg.norm(torch.diff(chain, dim=1), dim=-1) < 0.7).all()
    torch.testing.assert_close(w.predict(tx, torch.tensor([0, 1, 0, 1])), out)


def test_zero_head_gives_constant_trajectory():
    torch.manual_seed(1)
    w = TransformerWorker(1, 4, 1.0, d_model=16, n_heads=2, n_layers=1).zero_head()
    tx = _tx(units=1)
    out = w.predict(tx)
    expected = tx[:, -1].unsqueeze(1).expand(-1, 4, -1)
    torch.testing.assert_close(out, expected)


def test_worker_rejects_bad_shapes():
    w = TransformerWorker(1, 4, 1.0, d_model=16, n_heads=2, n_layers=1)
    with pytest.raises(InvalidInputError):
        w.predict(_tx(units=2))
    with pytest.raises(InvalidInputError):
        w(_tx(units=1), None, torch.zeros(4, 3, 2))


def test_teacher_forcing_first_step_matches_rollout():
    torch.manual_seed(2)
    w = TransformerWorker(1, 4, 1.0, d_model=16, n_heads=2, n_layers=1).eval()
    tx = _tx(units=1)
    roll = w.predict(tx)
    with torch.no_grad():
        forced = w(tx, None, roll)
    # fed its own rollout, teacher forcing reproduces it exactly (causal decoder)
    torch.testing.assert_close(forced, roll)


def test_build_worker_round_trip():
    for w in (TransformerWorker(1, 3, 2.0, d_model=8, n_heads=2, n_layers=1),
              RecurrentWorker(1, 3, 2.0, d_model=8), SeriesWorker(3, 1, 3, d_model=8)):
        clone = build_worker(w.config)
        clone.load_state_dict(w.state_dict())
        assert type(clone) is type(w)


def test_series_worker_shape():
    w = SeriesWorker(3, 2, horizon=5, d_model=8)
    out = w.predict(torch.randn(7, 10, 3))
    assert out.shape == (7, 5, 2)


def test_loss_matrix_against_loop():
    torch.manual_seed(3)
    workers = [TransformerWorker(1, 4, 1.0, d_model=16, n_heads=2, n_layers=1) for _ in range(2)]
    tx = _tx(b=3, units=1, seed=9)
    ty = tx[:, -1:].repeat(1, 4, 1) + torch.randn(3, 4, 2)
    m = loss_matrix(workers, tx, ty)
    assert m.shape == (3, 2)
    for i, w in enumerate(workers):
        pred = w.predict(tx)
        for j in range(3):
            assert float(m[j, i]) == pytest.approx(ade_loop(ty[j].tolist(), pred[j].tolist()),
                                                   rel=1e-5)


def test_per_worker_losses_degenerate_cases():
    torch.manual_seed(4)
    w = TransformerWorker(1, 4, 1.0, d_model=16, n_heads=2, n_layers=1)
    twin = build_worker(w.config)
    twin.load_state_dict(w.state_dict())
    tx = _tx(b=5, units=1)
    ty = torch.randn(5, 4, 2)

    class B:
        pass
    batch = B()
    batch.tx, batch.ty, batch.target = tx, ty, None
    rep = per_worker_losses([w, twin], batch)
    np.testing.assert_array_equal(rep.per_sample[:, 0], rep.per_sample[:, 1])
    single = per_worker_losses([w], batch).per_sample[:, 0]
    pred = w.predict(tx)
    np.testing.assert_allclose(single, [ade(a, b) for a, b in zip(ty.numpy(), pred.numpy())],
                               rtol=1e-5)


def test_worker_gradient_check(float64):
    torch.manual_seed(5)
    w = TransformerWorker(1, 3, 1.5, d_model=8, n_heads=2, n_layers=1)
    tx = _tx(b=3, lx=5, units=1, seed=1)
    ty = tx[:, -1:] + torch.cumsum(torch.randn(3, 3, 2), dim=1)
    err = directional_gradcheck(w, lambda: batch_loss("ade", w(tx), ty).mean(), n_dirs=20)
    assert err <= 1e-3
