import zlib

import numpy as np
import pytest
import scipy.sparse as sp

from infracascade import autodiff as ad
from infracascade.autodiff import Adam, ContractError, SparseAdj, Tape, Tensor, backward, gradient_error

from gradcases import PRIMITIVES


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    for _ in range(5):
        f, inputs = PRIMITIVES[name](rng)
        assert gradient_error(f, inputs) <= 1e-4


def test_matmul_identity_and_closed_form():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(3, 4))
    assert np.array_equal(ad.matmul(Tensor(np.eye(3)), Tensor(X)).data, X)
    A = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    B = Tensor(rng.normal(size=(3, 4)))
    with Tape():
        loss = ad.reduce_sum(ad.matmul(A, B))
    backward(loss)
    assert np.allclose(A.grad, np.ones((2, 4)) @ B.data.T, rtol=1e-12)


def test_forward_matches_numpy():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(5, 3))
    m = sp.random(5, 5, density=0.5, random_state=1, format="csr")
    assert np.allclose(ad.sparse_matmul(SparseAdj(m), Tensor(a)).data, m.toarray() @ a, rtol=1e-12, atol=0)
    assert np.allclose(ad.sigmoid(Tensor(a)).data, 1 / (1 + np.exp(-a)), rtol=1e-12)
    s = ad.row_softmax(Tensor(rng.normal(size=(16, 8)))).data
    assert np.allclose(s.sum(axis=1), 1.0, rtol=0, atol=1e-12)


def test_softmax_is_stable_for_large_inputs():
    s = ad.row_softmax(Tensor([[1000.0, 1000.0, -1000.0]])).data
    assert np.allclose(s, [[0.5, 0.5, 0.0]])


def test_square_scalar_grad():
    x = Tensor(3.0, requires_grad=True)
    with Tape():
        y = ad.square(x)
    backward(y)
    assert x.grad == 6.0


def test_relu_subgradient_at_zero():
    x = Tensor([[0.0, 1.0, -1.0]], requires_grad=True)
    with Tape():
        y = ad.reduce_sum(ad.relu(x))
    backward(y)
    assert x.grad.tolist() == [[0.0, 1.0, 0.0]]


def test_grads_accumulate_across_passes():
    x = Tensor([[2.0]], requires_grad=True)
    for _ in range(2):
        with Tape():
            y = ad.reduce_sum(ad.square(x))
        backward(y)
    assert x.grad.tolist() == [[8.0]]


def test_backward_contracts():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with Tape():
        y = ad.square(x)
    with pytest.raises(ContractError, match="scalar"):
        backward(y)
    with pytest.raises(ContractError):
        backward(ad.reduce_sum(Tensor(np.ones(2))))
    with Tape():
        z = ad.reduce_sum(ad.square(x))
    backward(z)
    with pytest.raises(ContractError, match="already"):
        backward(z)


def test_shape_errors_name_shapes():
    with pytest.raises(ContractError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ContractError):
        ad.concat_cols([Tensor(np.ones((2, 1))), Tensor(np.ones((3, 1)))])
    with pytest.raises(ContractError):
        Tensor(np.ones((2, 2, 2)))


def test_no_recording_outside_tape():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    y = ad.square(x)
    assert y._tape is None


def test_sgd_closed_form_and_convergence():
    x = Tensor(1.0, requires_grad=True)
    with Tape():
        y = ad.square(x)
    backward(y)
    ad.sgd_step([x], 0.1)
    assert x.item() == pytest.approx(0.8, abs=1e-15)
    for _ in range(100):
        x.grad = None
        with Tape():
            y = ad.square(x)
        backward(y)
        ad.sgd_step([x], 0.1)
    assert abs(x.item()) < 1e-6


def test_adam_first_step_is_signed_lr():
    x = Tensor(np.array([[2.0, -3.0, 0.5]]), requires_grad=True)
    with Tape():
        y = ad.reduce_sum(ad.square(x))
    backward(y)
    before = x.data.copy()
    state = ad.adam_step([x], lr=0.01)
    assert np.allclose(x.data - before, -0.01 * np.sign(before), atol=1e-8)
    assert isinstance(state, Adam) and state.t == 1


def test_optimiser_requires_gradients():
    with pytest.raises(ContractError):
        ad.sgd_step([Tensor(1.0, requires_grad=True)], 0.1)


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(5)
    tensors = {"b": Tensor(rng.normal(size=(3,))), "a.W": rng.normal(size=(2, 4)) * 1e-300}
    path = tmp_path / "ck.json"
    ad.save_checkpoint(path, tensors, meta={"seed": 1})
    back = ad.load_checkpoint(path)
    assert set(back) == {"a.W", "b"}
    assert np.array_equal(back["b"], tensors["b"].data)
    assert np.array_equal(back["a.W"], tensors["a.W"])
    assert ad.dumps_checkpoint(back, {"seed": 1}) == path.read_text()


def test_block_diag_matches_kron():
    m = SparseAdj(sp.random(4, 4, density=0.5, random_state=3), mode="mean")
    b = m.block_diag(3)
    assert np.allclose(b.dense(), np.kron(np.eye(3), m.dense()))
