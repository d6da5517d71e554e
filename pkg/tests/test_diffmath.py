# tests/test_diffmath.py

import pytest
import torch

from app.diffmath import DTYPE, ops, tensor
from app.diffmath.checkpoint import load_checkpoint, save_checkpoint
from app.diffmath.gradcheck import grad_check
from app.diffmath.graph import Graph, backward, forward
from app.diffmath.optim import OptimizerState, optimizer_step
from app.utils.errors import (
    BackwardBeforeForwardError,
    CheckpointFormatError,
    MissingGradientError,
    NonFiniteValueError,
    ShapeMismatchError,
    UnboundInputError,
)


def test_softmax_of_zeros_is_uniform():
    out = ops.softmax(tensor([0.0, 0.0]))
    assert out.tolist() == [0.5, 0.5]


def test_softmax_sums_to_one_and_is_positive():
    gen = torch.Generator().manual_seed(0)
    x = torch.randn(20, 7, generator=gen, dtype=DTYPE) * 5
    p = ops.softmax(x)
    assert (p > 0).all()
    assert torch.allclose(p.sum(-1), torch.ones(20, dtype=DTYPE), atol=1e-12, rtol=0)


def test_layer_norm_of_constant_vector_is_zero():
    assert torch.equal(ops.layer_norm(torch.full((5,), 3.0, dtype=DTYPE)), torch.zeros(5, dtype=DTYPE))


def test_layer_norm_moments():
    gen = torch.Generator().manual_seed(1)
    y = ops.layer_norm(torch.randn(8, 32, generator=gen, dtype=DTYPE))
    assert y.mean(-1).abs().max() < 1e-10
    assert (y.var(-1, unbiased=False) - 1).abs().max() < 1e-4


def test_single_token_attention_returns_value_row():
    d = 4
    x = tensor([[0.3, -1.0, 2.0, 0.5]])
    eye = torch.eye(d, dtype=DTYPE)
    out = ops.multi_head_attention(x, x, eye, eye, eye, eye, n_heads=1)
    assert torch.allclose(out, x, atol=1e-15)


def test_matmul_shape_mismatch_names_node():
    with pytest.raises(ShapeMismatchError) as info:
        ops.matmul(torch.zeros(2, 3, dtype=DTYPE), torch.zeros(4, 2, dtype=DTYPE), node="proj")
    assert info.value.node == "proj"


def test_concat_rejects_mismatched_shapes():
    with pytest.raises(ShapeMismatchError):
        ops.concat([torch.zeros(2, 3), torch.zeros(2, 4)], dim=0)


def test_embedding_lookup_out_of_range():
    with pytest.raises(ShapeMismatchError):
        ops.embedding_lookup(torch.zeros(3, 2), torch.tensor([3]))


def _product_graph():
    return Graph("mul", lambda b: b["x"] * b["y"], ("x", "y"))


def test_product_rule():
    graph = _product_graph()
    forward(graph, {"x": tensor(2.0), "y": tensor(3.0)})
    grads = backward(graph)
    assert grads["x"].item() == 3.0
    assert grads["y"].item() == 2.0


def test_gradient_of_softmax_sum_is_zero():
    graph = Graph("softmax_sum", lambda b: ops.softmax(b["x"]).sum(), ("x",))
    forward(graph, {"x": tensor([0.1, -2.0, 3.0])})
    assert backward(graph)["x"].abs().max() < 1e-15


def test_unused_input_gets_zero_gradient():
    graph = Graph("only_x", lambda b: (b["x"] ** 2).sum(), ("x", "w"))
    forward(graph, {"x": tensor([1.0, 2.0]), "w": tensor([5.0])})
    assert torch.equal(backward(graph)["w"], torch.zeros(1, dtype=DTYPE))


def test_backward_before_forward():
    with pytest.raises(BackwardBeforeForwardError):
        backward(_product_graph())


def test_unbound_input():
    with pytest.raises(UnboundInputError) as info:
        forward(_product_graph(), {"x": tensor(1.0)})
    assert info.value.missing == ["y"]


def test_forward_is_bitwise_deterministic():
    graph = Graph("ln", lambda b: ops.layer_norm(b["x"]) @ b["w"], ("x", "w"))
    gen = torch.Generator().manual_seed(2)
    point = {"x": torch.randn(3, 8, generator=gen, dtype=DTYPE), "w": torch.randn(8, 2, generator=gen, dtype=DTYPE)}
    assert torch.equal(forward(graph, point), forward(graph, point))


def test_grad_check_linear_is_exact():
    gen = torch.Generator().manual_seed(3)
    a = torch.randn(4, 3, generator=gen, dtype=DTYPE)
    graph = Graph("linear", lambda b: b["x"] @ a, ("x",))
    assert grad_check(graph, {"x": torch.randn(2, 4, generator=gen, dtype=DTYPE)}) < 1e-9


@pytest.mark.parametrize("seed", range(10))
def test_grad_check_ops(seed):
    gen = torch.Generator().manual_seed(seed)
    d = 8

    def fn(b):
        h = ops.layer_norm(b["x"], b["g"], b["beta"])
        att = ops.multi_head_attention(h, h, b["wq"], b["wk"], b["wv"], b["wo"], n_heads=2)
        logits = ops.gelu(att).sum(-1)
        return ops.log(ops.softmax(logits, dim=-1)).mean() + ops.cosine_similarity(h, b["x"]).sum()

    names = ("x", "g", "beta", "wq", "wk", "wv", "wo")
    point = {
        "x": torch.randn(3, d, generator=gen, dtype=DTYPE),
        "g": 1 + 0.1 * torch.randn(d, generator=gen, dtype=DTYPE),
        "beta": 0.1 * torch.randn(d, generator=gen, dtype=DTYPE),
        **{w: torch.randn(d, d, generator=gen, dtype=DTYPE) / d ** 0.5 for w in ("wq", "wk", "wv", "wo")},
    }
    assert grad_check(Graph("block", fn, names), point) < 1e-4


def test_grad_check_layer_norm_near_constant():
    x = torch.full((6,), 0.7, dtype=DTYPE) + 1e-3 * torch.arange(6, dtype=DTYPE)
    graph = Graph("ln", lambda b: (ops.layer_norm(b["x"]) * torch.arange(6, dtype=DTYPE)).sum(), ("x",))
    assert grad_check(graph, {"x": x}) < 1e-3


class _OffByOne(torch.autograd.Function):
    """sum(w * x^2) whose backward adds 1e-3 to flat entry 17."""

    @staticmethod
    def forward(ctx, x, w):
        ctx.save_for_backward(x, w)
        return (w * x * x).sum()

    @staticmethod
    def backward(ctx, grad):
        x, w = ctx.saved_tensors
        gx = 2.0 * w * x * grad
        gx.reshape(-1)[17] += 1e-3
        return gx, None


def test_grad_check_catches_a_single_wrong_entry():
    x = torch.randn(20, 50, generator=torch.Generator().manual_seed(21), dtype=DTYPE)
    w = torch.linspace(0.5, 1.5, 1000, dtype=DTYPE).reshape(20, 50)
    graph = Graph("skewed", lambda b: _OffByOne.apply(b["x"], w), ("x",))
    # the error is invisible at the scale of the whole gradient
    assert 1e-3 / (2.0 * w * x).norm().item() < 1e-4
    assert grad_check(graph, {"x": x}) > 1e-4


def test_grad_check_samples_large_inputs():
    gen = torch.Generator().manual_seed(22)
    a = torch.randn(40, 3, generator=gen, dtype=DTYPE)
    graph = Graph("linear", lambda b: (b["x"] @ a).sum() + (b["y"] ** 2).sum(), ("x", "y"))
    point = {"x": torch.randn(5, 40, generator=gen, dtype=DTYPE), "y": torch.randn(3, generator=gen, dtype=DTYPE)}
    assert grad_check(graph, point, max_entries=8) < 1e-6


def test_grad_check_rejects_non_finite_point():
    graph = Graph("log", lambda b: ops.log(b["x"]).sum(), ("x",))
    with pytest.raises(NonFiniteValueError):
        grad_check(graph, {"x": tensor([float("nan")])})


def test_grad_check_rejects_bad_step():
    with pytest.raises(ValueError):
        grad_check(_product_graph(), {"x": tensor(1.0), "y": tensor(1.0)}, h=0.0)


def test_zero_gradient_leaves_parameters_unchanged():
    p = torch.nn.Parameter(tensor([1.0, -2.0]))
    state = OptimizerState({"p": p})
    state.step({"p": torch.zeros(2, dtype=DTYPE)})
    assert p.tolist() == [1.0, -2.0]
    assert state.step_count == 1


def test_clipping_reports_the_unclipped_norm():
    p = torch.nn.Parameter(tensor([0.0, 0.0]))
    state = OptimizerState({"p": p}, lr=0.1, clip_norm=1.0)
    assert state.step({"p": tensor([3.0, 4.0])}) == pytest.approx(5.0, abs=1e-12)
    assert p.abs().max().item() <= 0.1 + 1e-12


def test_zero_learning_rate_freezes_parameters():
    p = torch.nn.Parameter(tensor([1.0, -2.0]))
    state = OptimizerState({"p": p}, lr=0.1)
    state.set_lr(0.0)
    state.step({"p": tensor([1.0, 1.0])})
    assert p.tolist() == [1.0, -2.0]
    assert state.lr == 0.0


def test_quadratic_loss_decreases():
    p = torch.nn.Parameter(tensor([3.0]))
    state = OptimizerState({"p": p}, lr=0.01)
    losses = []
    for _ in range(200):
        loss = (p ** 2).sum()
        losses.append(loss.item())
        (grad,) = torch.autograd.grad(loss, [p])
        state.step({"p": grad})
    assert all(b < a for a, b in zip(losses[1:], losses[2:]))
    moment, second = state.moments("p")
    assert moment.shape == p.shape and second.shape == p.shape


def test_missing_gradient_is_an_error():
    state = OptimizerState({"a": torch.nn.Parameter(tensor([1.0])), "b": torch.nn.Parameter(tensor([1.0]))})
    with pytest.raises(MissingGradientError) as info:
        state.step({"a": tensor([1.0])})
    assert info.value.missing == ["b"]


def test_frozen_parameters_excluded_from_update():
    trainable = torch.nn.Parameter(tensor([1.0]))
    frozen = torch.nn.Parameter(tensor([1.0]), requires_grad=False)
    state = OptimizerState({"t": trainable})
    optimizer_step({"t": trainable, "f": frozen}, {"t": tensor([1.0])}, state)
    assert frozen.item() == 1.0
    assert trainable.item() != 1.0


def test_checkpoint_round_trip(tmp_path):
    gen = torch.Generator().manual_seed(4)
    tensors = {"b.w": torch.randn(3, 2, generator=gen, dtype=DTYPE), "a": tensor(1.5), "c": torch.zeros(0, dtype=DTYPE)}
    path = save_checkpoint(str(tmp_path / "m.gvlm"), tensors)
    loaded = load_checkpoint(path)
    assert set(loaded) == set(tensors)
    for name, value in tensors.items():
        assert torch.equal(loaded[name], value)


def test_checkpoint_rejects_other_files(tmp_path):
    path = tmp_path / "bad.gvlm"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(str(path))


def test_checkpoint_truncated(tmp_path):
    path = save_checkpoint(str(tmp_path / "m.gvlm"), {"w": torch.ones(4, dtype=DTYPE)})
    with open(path, "rb") as f:
        data = f.read()
    with open(path, "wb") as f:
        f.write(data[:-8])
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(path)
