"""Random finite-difference cases for every differentiable tensor op."""

import numpy as np

from rfsep import tensor as T
from rfsep.tensor import Tensor


def rel_err(a, b):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-8)


def away_from_zero(x, margin=0.05):
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin + x, x)


# Each entry builds a scalar function of one float64 input for a random instance.
def _cases():
    def conv_case(r):
        c_in, c_out = r.integers(1, 4), r.integers(1, 4)
        k = int(r.choice([1, 2, 3]))
        stride, pad = int(r.integers(1, 3)), int(r.integers(0, 2))
        h, w = int(r.integers(k + 1, 7)), int(r.integers(k + 1, 7))
        x = r.standard_normal((2, c_in, h, w))
        wt = Tensor(r.standard_normal((c_out, c_in, k, k)))
        b = Tensor(r.standard_normal(c_out))
        proj = r.standard_normal((2, c_out, T.conv_output_size(h, k, stride, pad), T.conv_output_size(w, k, stride, pad)))
        return x, lambda t: T.sum_(T.conv2d(t, wt, b, stride, pad) * proj)

    def conv_kernel_case(r):
        x = Tensor(r.standard_normal((2, 2, 5, 4)))
        k = r.standard_normal((3, 2, 3, 3))
        proj = r.standard_normal((2, 3, 3, 2))
        return k, lambda t: T.sum_(T.conv2d(x, t, None, 2, 1) * proj)

    def elementwise(name):
        def case(r):
            shape = (int(r.integers(1, 4)), int(r.integers(1, 5)))
            x = away_from_zero(r.standard_normal(shape))
            proj = r.standard_normal(shape)
            fn = {"relu": T.relu, "silu": T.silu, "exp": T.exp, "clamp": lambda t: T.clamp_min(t, 0.3)}[name]
            if name == "clamp":
                x = np.where(np.abs(x - 0.3) < 0.05, x + 0.1, x)
            return x, lambda t: T.sum_(fn(t) * proj)

        return case

    def binary(name):
        def case(r):
            x = r.standard_normal((3, 4))
            other = Tensor(r.standard_normal((1, 4)))
            proj = r.standard_normal((3, 4))
            fn = {"add": T.add, "sub": T.sub, "mul": T.mul}[name]
            return x, lambda t: T.sum_(fn(t, other) * proj)

        return case

    def broadcast_rhs(r):
        a = Tensor(r.standard_normal((2, 3, 4)))
        x = r.standard_normal((3, 1))
        return x, lambda t: T.sum_(T.mul(a, t) + T.mul(T.add(a, t), a))

    def matmul_case(r):
        m, k, n = (int(v) for v in r.integers(1, 5, size=3))
        b = Tensor(r.standard_normal((k, n)))
        x = r.standard_normal((m, k))
        proj = r.standard_normal((m, n))
        return x, lambda t: T.sum_(T.matmul(t, b) * proj)

    def linear_case(r):
        x = Tensor(r.standard_normal((3, 4)))
        wt = r.standard_normal((5, 4))
        bias = Tensor(r.standard_normal(5))
        proj = r.standard_normal((3, 5))
        return wt, lambda t: T.sum_(T.linear(x, t, bias) * proj)

    def gn_case(r):
        x = r.standard_normal((2, 3, 4, 2)) * 2 + 1
        g = Tensor(r.standard_normal(3))
        b = Tensor(r.standard_normal(3))
        proj = r.standard_normal((2, 3, 4, 2))
        return x, lambda t: T.sum_(T.group_norm(t, g, b) * proj)

    def gn_gamma_case(r):
        x = Tensor(r.standard_normal((2, 3, 4, 2)))
        b = Tensor(r.standard_normal(3))
        proj = r.standard_normal((2, 3, 4, 2))
        return r.standard_normal(3), lambda t: T.sum_(T.group_norm(x, t, b) * proj)

    def softmax_case(r):
        x = r.standard_normal((3, 5))
        proj = r.standard_normal((3, 5))
        return x, lambda t: T.sum_(T.softmax(t) * proj)

    def log_softmax_case(r):
        x = r.standard_normal((3, 5))
        proj = r.standard_normal((3, 5))
        return x, lambda t: T.sum_(T.log_softmax(t) * proj)

    def ce_case(r):
        x = r.standard_normal((4, 6))
        labels = r.integers(0, 6, size=4)
        return x, lambda t: T.cross_entropy(t, labels)

    def mse_case(r):
        y = Tensor(r.standard_normal((2, 3, 3)))
        return r.standard_normal((2, 3, 3)), lambda t: T.mse(t, y)

    def reductions(r):
        x = r.standard_normal((2, 3, 4))
        proj = r.standard_normal((2, 4))
        return x, lambda t: T.sum_(T.mean(t, axis=1) * proj) + T.sum_(t) * 0.5

    def concat_slice(r):
        x = r.standard_normal((2, 3, 4, 2))
        other = Tensor(r.standard_normal((2, 2, 4, 2)))
        proj = r.standard_normal((2, 4, 4, 2))
        return x, lambda t: T.sum_(T.slice_channels(T.concat_channels(t, other), 1, 5) * proj)

    def up_crop(r):
        x = r.standard_normal((1, 2, 3, 2))
        proj = r.standard_normal((1, 2, 5, 3))
        return x, lambda t: T.sum_(T.crop2d(T.upsample2x(t), 5, 3) * proj)

    def d2s_case(r):
        x = r.standard_normal((2, 8, 3, 2))
        proj = r.standard_normal((2, 2, 6, 4))
        return x, lambda t: T.sum_(T.depth_to_space(t, 2) * proj)

    def reshape_case(r):
        x = r.standard_normal((2, 6))
        proj = r.standard_normal((3, 4))
        return x, lambda t: T.sum_(T.reshape(t, (3, 4)) * proj)

    return {
        "conv2d_input": conv_case,
        "conv2d_kernel": conv_kernel_case,
        "relu": elementwise("relu"),
        "silu": elementwise("silu"),
        "exp": elementwise("exp"),
        "clamp_min": elementwise("clamp"),
        "add": binary("add"),
        "sub": binary("sub"),
        "mul": binary("mul"),
        "broadcast": broadcast_rhs,
        "matmul": matmul_case,
        "linear": linear_case,
        "group_norm": gn_case,
        "group_norm_affine": gn_gamma_case,
        "softmax": softmax_case,
        "log_softmax": log_softmax_case,
        "cross_entropy": ce_case,
        "mse": mse_case,
        "sum_mean": reductions,
        "concat_slice": concat_slice,
        "upsample_crop": up_crop,
        "reshape": reshape_case,
        "depth_to_space": d2s_case,
    }


GRAD_CASES = _cases()


def gradient_check(name, instances=20, seed=0):
    """Worst relative error of backward() against central differences over random instances."""
    r = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        x, f = GRAD_CASES[name](r)
        a = T.analytic_grad(f, x)
        n = T.finite_diff_grad(f, Tensor(x), h=1e-3)
        worst = max(worst, rel_err(a, n))
    return worst
