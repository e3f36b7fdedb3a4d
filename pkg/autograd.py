"""Tape-based reverse-mode differentiation over the tensor_core kernels.

Graph builders are written once against an ``ops`` object and run either
eagerly (``EAGER``, plain arrays in and out) or recorded on a ``Tape`` (``Var``
handles in and out). Both paths call the same kernels, so a traced forward
pass is bit-identical to the untraced one.

    def builder(ops, inputs):
        y = ops.conv2d(inputs["x"], inputs["w"], inputs["b"], Conv2dSpec())
        return ops.l1_loss(ops.sigmoid(y), target)

    loss, tape = forward_traced(builder, {"x": x, "w": w, "b": b})
    grads = backward(tape, 1.0)
"""

import contextlib
import logging
from dataclasses import dataclass, field

import numpy as np

import tensor_core as tc
from errors import DimensionError, UsageError

logger = logging.getLogger(__name__)

GRADCHECK_EPSILON = 1e-2
GRADCHECK_TOLERANCE = 1e-2
SHADOW_TOLERANCE = 1e-4
# gradient magnitude below which entries are compared absolutely by the checker
GRADCHECK_FLOOR = 1e-3


@dataclass(frozen=True, eq=False)
class Var:
    """Handle to a value recorded on a tape."""

    index: int
    value: np.ndarray
    requires_grad: bool

    @property
    def shape(self):
        return self.value.shape


@dataclass
class TapeNode:
    op: str
    inputs: tuple
    saved: dict
    shape: tuple
    requires_grad: bool
    name: str = None


class Tape:
    """Records every op applied to ``Var`` handles, in execution order.

    Execution order is a topological order of the graph, so walking the node
    list backwards visits each node once, after all of its consumers.
    """

    def __init__(self):
        self.nodes = []
        self.leaves = {}
        self.output = None

    def _record(self, op, inputs, value, saved=None, name=None):
        requires_grad = any(self.nodes[i].requires_grad for i in inputs)
        node = TapeNode(op, tuple(inputs), saved or {}, np.shape(value), requires_grad, name)
        self.nodes.append(node)
        return Var(len(self.nodes) - 1, value, requires_grad)

    def leaf(self, name, value, requires_grad=True):
        if isinstance(value, Var):
            return value
        if name in self.leaves:
            return self.leaves[name]
        node = TapeNode("leaf", (), {}, np.shape(value), requires_grad, name)
        self.nodes.append(node)
        var = Var(len(self.nodes) - 1, value, requires_grad)
        self.leaves[name] = var
        return var

    def constant(self, value):
        if isinstance(value, Var):
            return value
        self.nodes.append(TapeNode("constant", (), {}, np.shape(value), False))
        return Var(len(self.nodes) - 1, np.asarray(value), False)

    def conv2d(self, x, kernel, bias, spec=tc.Conv2dSpec()):
        x, kernel, bias = self.constant(x), self.constant(kernel), self.constant(bias)
        out = tc.conv2d(x.value, kernel.value, bias.value, spec)
        saved = {"x": x.value, "kernel": kernel.value, "spec": spec}
        return self._record("conv2d", (x.index, kernel.index, bias.index), out, saved)

    def transpose_conv2d(self, x, kernel, bias, spec=tc.TransposeConv2dSpec()):
        x, kernel, bias = self.constant(x), self.constant(kernel), self.constant(bias)
        out = tc.transpose_conv2d(x.value, kernel.value, bias.value, spec)
        saved = {"x": x.value, "kernel": kernel.value}
        return self._record("transpose_conv2d", (x.index, kernel.index, bias.index), out, saved)

    def avg_pool2d(self, x, spec=tc.Pool2dSpec("average")):
        x = self.constant(x)
        return self._record("avg_pool2d", (x.index,), tc.avg_pool2d(x.value, spec))

    def max_pool2d(self, x, spec=tc.Pool2dSpec("max")):
        x = self.constant(x)
        saved = {"argmax": tc.max_pool2d_argmax(x.value)}
        return self._record("max_pool2d", (x.index,), tc.max_pool2d(x.value, spec), saved)

    def pool2d(self, x, spec):
        if spec.kind == "max":
            return self.max_pool2d(x, spec)
        return self.avg_pool2d(x, spec)

    def sigmoid(self, x):
        x = self.constant(x)
        out = tc.sigmoid(x.value)
        return self._record("sigmoid", (x.index,), out, {"y": out})

    def relu(self, x):
        x = self.constant(x)
        return self._record("relu", (x.index,), tc.relu(x.value), {"x": x.value})

    def batch_norm(self, x, gamma, beta, running_mean, running_var, mode="train",
                   momentum=tc.BN_MOMENTUM, epsilon=tc.BN_EPSILON):
        x, gamma, beta = self.constant(x), self.constant(gamma), self.constant(beta)
        running_mean = running_mean.value if isinstance(running_mean, Var) else running_mean
        running_var = running_var.value if isinstance(running_var, Var) else running_var
        out, new_mean, new_var = tc.batch_norm(
            x.value, gamma.value, beta.value, running_mean, running_var, mode, momentum, epsilon
        )
        wide = x.value.astype(np.float64)
        if mode == "train":
            mean = wide.mean(axis=(0, 2, 3))
            var = wide.var(axis=(0, 2, 3))
        else:
            mean = running_mean.astype(np.float64)
            var = running_var.astype(np.float64)
        inv_std = 1.0 / np.sqrt(var + epsilon)
        x_hat = (wide - mean[None, :, None, None]) * inv_std[None, :, None, None]
        saved = {"x_hat": x_hat, "gamma": gamma.value, "inv_std": inv_std, "mode": mode}
        var_out = self._record("batch_norm", (x.index, gamma.index, beta.index), out, saved)
        return var_out, new_mean, new_var

    def l1_loss(self, prediction, target):
        prediction, target = self.constant(prediction), self.constant(target)
        value = np.float64(tc.mean_abs_error(prediction.value, target.value))
        saved = {"residual": prediction.value.astype(np.float64) - target.value.astype(np.float64)}
        return self._record("l1_loss", (prediction.index, target.index), value, saved)

    def l2_loss(self, prediction, target):
        prediction, target = self.constant(prediction), self.constant(target)
        value = np.float64(tc.mean_squared_error(prediction.value, target.value))
        saved = {"residual": prediction.value.astype(np.float64) - target.value.astype(np.float64)}
        return self._record("l2_loss", (prediction.index, target.index), value, saved)

    def crop(self, x, height, width):
        x = self.constant(x)
        if x.value.shape[2] == height and x.value.shape[3] == width:
            return x
        return self._record("crop", (x.index,), tc.crop(x.value, height, width), {"input_shape": x.value.shape})

    def mul(self, a, b):
        a, b = self.constant(a), self.constant(b)
        return self._record("mul", (a.index, b.index), a.value * b.value, {"a": a.value, "b": b.value})

    def sum(self, x):
        x = self.constant(x)
        value = np.float64(x.value.astype(np.float64).sum())
        return self._record("sum", (x.index,), value, {"input_shape": x.value.shape})


class EagerOps:
    """Same interface as ``Tape``, without recording anything."""

    def leaf(self, name, value, requires_grad=True):
        return value

    def constant(self, value):
        return value

    conv2d = staticmethod(tc.conv2d)
    transpose_conv2d = staticmethod(tc.transpose_conv2d)
    avg_pool2d = staticmethod(tc.avg_pool2d)
    max_pool2d = staticmethod(tc.max_pool2d)
    pool2d = staticmethod(tc.pool2d)
    sigmoid = staticmethod(tc.sigmoid)
    relu = staticmethod(tc.relu)
    batch_norm = staticmethod(tc.batch_norm)
    crop = staticmethod(tc.crop)

    def l1_loss(self, prediction, target):
        return np.float64(tc.mean_abs_error(prediction, target))

    def l2_loss(self, prediction, target):
        return np.float64(tc.mean_squared_error(prediction, target))

    def mul(self, a, b):
        return a * b

    def sum(self, x):
        return np.float64(x.astype(np.float64).sum())


EAGER = EagerOps()


def _unpool(grad, factor=1.0):
    return np.repeat(np.repeat(grad, 2, axis=2), 2, axis=3) * factor


def _conv2d_backward(node, grad, needs):
    x, kernel, spec = node.saved["x"], node.saved["kernel"], node.saved["spec"]
    g = grad.astype(np.float64)
    out_h, out_w = g.shape[2], g.shape[3]
    grad_x = grad_k = grad_b = None
    if needs[0]:
        # (N, H', W', Cin, kh, kw) scattered back onto the padded input
        cols = np.tensordot(g, kernel.astype(np.float64), axes=([1], [0]))
        n, c_in, h, w = x.shape
        p, s = spec.padding, spec.stride
        padded = np.zeros((n, c_in, h + 2 * p, w + 2 * p))
        for dy in range(spec.kernel_h):
            for dx in range(spec.kernel_w):
                padded[:, :, dy:dy + s * (out_h - 1) + 1:s, dx:dx + s * (out_w - 1) + 1:s] += (
                    cols[..., dy, dx].transpose(0, 3, 1, 2)
                )
        grad_x = padded[:, :, p:p + h, p:p + w].astype(x.dtype)
    if needs[1]:
        windows = tc.conv_windows(tc.pad_zero(x.astype(np.float64), spec.padding), spec)[:, :, :out_h, :out_w]
        grad_k = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3])).astype(kernel.dtype)
    if needs[2]:
        grad_b = g.sum(axis=(0, 2, 3)).astype(grad.dtype)
    return grad_x, grad_k, grad_b


def _transpose_conv2d_backward(node, grad, needs):
    x, kernel = node.saved["x"], node.saved["kernel"]
    n, c_out, h2, w2 = grad.shape
    g6 = grad.astype(np.float64).reshape(n, c_out, h2 // 2, 2, w2 // 2, 2)
    grad_x = grad_k = grad_b = None
    if needs[0]:
        grad_x = np.einsum("nohkwl,cokl->nchw", g6, kernel.astype(np.float64), optimize=True).astype(x.dtype)
    if needs[1]:
        grad_k = np.einsum("nchw,nohkwl->cokl", x.astype(np.float64), g6, optimize=True).astype(kernel.dtype)
    if needs[2]:
        grad_b = g6.sum(axis=(0, 2, 3, 4, 5)).astype(grad.dtype)
    return grad_x, grad_k, grad_b


def _avg_pool2d_backward(node, grad, needs):
    return (_unpool(grad, 0.25).astype(grad.dtype),)


def _max_pool2d_backward(node, grad, needs):
    argmax = node.saved["argmax"]
    n, c, h, w = argmax.shape
    routed = (np.arange(4) == argmax[..., None]) * grad[..., None]
    routed = routed.reshape(n, c, h, w, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h, 2 * w)
    return (routed.astype(grad.dtype),)


def _sigmoid_backward(node, grad, needs):
    y = node.saved["y"].astype(np.float64)
    return ((grad * y * (1.0 - y)).astype(grad.dtype),)


def _relu_backward(node, grad, needs):
    return ((grad * (node.saved["x"] > 0)).astype(grad.dtype),)


def _batch_norm_backward(node, grad, needs):
    x_hat, gamma, inv_std = node.saved["x_hat"], node.saved["gamma"], node.saved["inv_std"]
    g = grad.astype(np.float64)
    sum_g = g.sum(axis=(0, 2, 3))
    sum_gx = (g * x_hat).sum(axis=(0, 2, 3))
    scale = (gamma.astype(np.float64) * inv_std)[None, :, None, None]
    grad_x = None
    if needs[0]:
        if node.saved["mode"] == "train":
            m = g.shape[0] * g.shape[2] * g.shape[3]
            grad_x = scale * (g - sum_g[None, :, None, None] / m - x_hat * sum_gx[None, :, None, None] / m)
        else:
            grad_x = scale * g
        grad_x = grad_x.astype(grad.dtype)
    return grad_x, sum_gx.astype(gamma.dtype), sum_g.astype(gamma.dtype)


def _l1_loss_backward(node, grad, needs):
    residual = node.saved["residual"]
    # d|r|/dr is taken as 0 at r == 0, which np.sign gives
    g = float(grad) * np.sign(residual) / residual.size
    return g, -g


def _l2_loss_backward(node, grad, needs):
    residual = node.saved["residual"]
    g = float(grad) * 2.0 * residual / residual.size
    return g, -g


def _crop_backward(node, grad, needs):
    full = np.zeros(node.saved["input_shape"], dtype=grad.dtype)
    full[:, :, : grad.shape[2], : grad.shape[3]] = grad
    return (full,)


def _mul_backward(node, grad, needs):
    return grad * node.saved["b"], grad * node.saved["a"]


def _sum_backward(node, grad, needs):
    return (np.full(node.saved["input_shape"], float(grad)),)


BACKWARD_RULES = {
    "conv2d": _conv2d_backward,
    "transpose_conv2d": _transpose_conv2d_backward,
    "avg_pool2d": _avg_pool2d_backward,
    "max_pool2d": _max_pool2d_backward,
    "sigmoid": _sigmoid_backward,
    "relu": _relu_backward,
    "batch_norm": _batch_norm_backward,
    "l1_loss": _l1_loss_backward,
    "l2_loss": _l2_loss_backward,
    "crop": _crop_backward,
    "mul": _mul_backward,
    "sum": _sum_backward,
}


@contextlib.contextmanager
def corrupted_rule(op, factor=1.5):
    """Scale the gradients produced by one backward rule (negative control)."""
    if op not in BACKWARD_RULES:
        raise UsageError(f"no backward rule named {op!r}")
    original = BACKWARD_RULES[op]

    def scaled(node, grad, needs):
        return tuple(None if g is None else g * factor for g in original(node, grad, needs))

    BACKWARD_RULES[op] = scaled
    try:
        yield
    finally:
        BACKWARD_RULES[op] = original


def forward_traced(graph_builder, inputs):
    """Run ``graph_builder(ops, inputs)`` on a fresh tape.

    ``inputs`` maps names to arrays; each becomes a leaf. Returns the output
    value and the tape, whose ``output`` is the returned handle.
    """
    tape = Tape()
    leaves = {name: tape.leaf(name, value) for name, value in inputs.items()}
    out = graph_builder(tape, leaves)
    if not isinstance(out, Var):
        out = tape.constant(out)
    tape.output = out
    return out.value, tape


def backward(tape, seed_grad, output=None):
    """Gradients of ``output`` (default: the tape's output) for every leaf."""
    output = output if output is not None else tape.output
    if output is None:
        raise UsageError("tape has no output; build it with forward_traced")
    seed = np.asarray(seed_grad, dtype=np.float64)
    if seed.shape != np.shape(output.value):
        if seed.ndim == 0:
            seed = np.full(np.shape(output.value), float(seed))
        else:
            raise DimensionError(f"seed shape {seed.shape} does not match output {np.shape(output.value)}", axis="seed")
    if np.ndim(output.value) > 0:
        seed = seed.astype(output.value.dtype)

    pending = {output.index: seed}
    leaf_grads = {}
    for index in range(output.index, -1, -1):
        grad = pending.pop(index, None)
        node = tape.nodes[index]
        if grad is None or not node.requires_grad:
            continue
        if node.op == "leaf":
            leaf_grads[node.name] = grad
            continue
        needs = [tape.nodes[i].requires_grad for i in node.inputs]
        input_grads = BACKWARD_RULES[node.op](node, grad, needs)
        for i, g, need in zip(node.inputs, input_grads, needs):
            if not need or g is None:
                continue
            if i in pending:
                pending[i] = pending[i] + g
            else:
                pending[i] = g

    for name, var in tape.leaves.items():
        if var.requires_grad and name not in leaf_grads:
            leaf_grads[name] = np.zeros_like(var.value)
    return leaf_grads


@dataclass
class ParamCheck:
    name: str
    max_rel_error: float
    entries_checked: int
    frozen: bool = False
    passed: bool = True


@dataclass
class GradCheckReport:
    epsilon: float
    tolerance: float
    shadow: bool
    params: dict = field(default_factory=dict)

    @property
    def passed(self):
        return all(p.passed for p in self.params.values() if not p.frozen)

    def worst(self, count=5):
        ranked = sorted(self.params.values(), key=lambda p: p.max_rel_error, reverse=True)
        return ranked[:count]

    def format(self):
        lines = [f"gradient check: epsilon={self.epsilon} tolerance={self.tolerance} shadow={self.shadow}"]
        for p in self.params.values():
            status = "frozen" if p.frozen else ("ok" if p.passed else "FAIL")
            lines.append(f"  {p.name:<40} {p.max_rel_error:.3e} ({p.entries_checked} entries) {status}")
        lines.append("PASS" if self.passed else "FAIL")
        return "\n".join(lines)


def relative_error(analytic, numeric, floor=1e-8):
    """Largest per-entry |a - n| / max(|a|, |n|, floor)."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.size == 0:
        return 0.0
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / scale))


def grad_check(graph_builder, inputs, params=None, epsilon=GRADCHECK_EPSILON, tolerance=None,
               frozen=(), shadow=False, max_entries=None, seed=0, floor=GRADCHECK_FLOOR):
    """Compare backward() against central differences (f(t+e) - f(t-e)) / 2e.

    ``params`` names the inputs to check (all by default); ``frozen`` names are
    reported but do not count toward pass/fail. With ``shadow`` every input is
    promoted to float64 so only truncation error remains. ``max_entries`` caps
    the number of randomly chosen entries checked per parameter. Entries whose
    gradients are both below ``floor`` are held to ``tolerance * floor`` in
    absolute terms.
    """
    if epsilon <= 0:
        raise UsageError("epsilon must be positive")
    if tolerance is None:
        tolerance = SHADOW_TOLERANCE if shadow else GRADCHECK_TOLERANCE
    dtype = np.float64 if shadow else np.float32
    values = {name: np.array(value, dtype=dtype) for name, value in inputs.items()}
    params = list(values) if params is None else list(params)

    out, tape = forward_traced(graph_builder, values)
    if np.size(out) != 1 or np.ndim(out) != 0:
        raise UsageError(f"gradient check needs a scalar output, got shape {np.shape(out)}")
    analytic = backward(tape, 1.0)

    def evaluate():
        return float(graph_builder(EAGER, values))

    rng = np.random.default_rng(seed)
    report = GradCheckReport(epsilon=epsilon, tolerance=tolerance, shadow=shadow)
    for name in params:
        value = values[name]
        flat = value.reshape(-1)
        indices = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            indices = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        numeric = np.empty(len(indices))
        for k, i in enumerate(indices):
            original = flat[i]
            flat[i] = original + epsilon
            plus = evaluate()
            flat[i] = original - epsilon
            minus = evaluate()
            flat[i] = original
            numeric[k] = (plus - minus) / (2.0 * epsilon)
        error = relative_error(analytic[name].reshape(-1)[indices], numeric, floor)
        is_frozen = name in frozen
        report.params[name] = ParamCheck(name, error, len(indices), is_frozen, error < tolerance)
        logger.debug("grad check %s: %.3e", name, error)
    return report


def _margin_target(output, rng, margin=0.5):
    """Target at least ``margin`` away from every output value, on a random side."""
    sign = np.where(rng.random(np.shape(output)) < 0.5, -1.0, 1.0)
    return (output + sign * (margin + rng.random(np.shape(output)))).astype(np.float32)


def _random_shape(rng):
    return (int(rng.integers(1, 3)), int(rng.integers(1, 4)), 2 * int(rng.integers(1, 4)), 2 * int(rng.integers(1, 4)))


def op_suite(seed):
    """One seeded case per differentiable op: ``(label, builder, inputs)``.

    Every case ends in the L1 loss. Targets keep residuals away from zero and
    inputs of relu / max-pool keep a gap around their kinks, so central
    differences never straddle a non-differentiable point.
    """
    rng = np.random.default_rng(seed)
    cases = []

    def add(label, apply, inputs):
        target = _margin_target(apply(EAGER, inputs), rng)

        def builder(ops, leaves):
            return ops.l1_loss(apply(ops, leaves), target)

        cases.append((label, builder, inputs))

    def normal(*shape):
        return rng.standard_normal(shape).astype(np.float32)

    n, c, h, w = _random_shape(rng)
    c_out = int(rng.integers(1, 4))
    conv = tc.Conv2dSpec(3, 3, stride=int(rng.integers(1, 3)), padding=1)
    add("conv2d", lambda ops, p: ops.conv2d(p["x"], p["kernel"], p["bias"], conv),
        {"x": normal(n, c, h, w), "kernel": normal(c_out, c, 3, 3), "bias": normal(c_out)})

    n, c, h, w = _random_shape(rng)
    add("transpose_conv2d", lambda ops, p: ops.transpose_conv2d(p["x"], p["kernel"], p["bias"]),
        {"x": normal(n, c, h, w), "kernel": normal(c, c_out, 2, 2), "bias": normal(c_out)})

    n, c, h, w = _random_shape(rng)
    add("avg_pool2d", lambda ops, p: ops.avg_pool2d(p["x"]), {"x": normal(n, c, h, w)})

    n, c, h, w = _random_shape(rng)
    spread = (rng.permutation(n * c * h * w) * 0.1 - 0.05 * n * c * h * w).reshape(n, c, h, w)
    add("max_pool2d", lambda ops, p: ops.max_pool2d(p["x"]), {"x": spread.astype(np.float32)})

    n, c, h, w = _random_shape(rng)
    away = normal(n, c, h, w)
    away = (np.sign(away) * (0.1 + np.abs(away))).astype(np.float32)
    add("relu", lambda ops, p: ops.relu(p["x"]), {"x": away})

    n, c, h, w = _random_shape(rng)
    add("sigmoid", lambda ops, p: ops.sigmoid(p["x"]), {"x": normal(n, c, h, w)})

    # at least 16 widely spread values per channel for well-conditioned batch statistics
    n, c, h, w = _random_shape(rng)
    h, w = max(h, 4), max(w, 4)
    stats = (np.zeros(c, np.float32), np.ones(c, np.float32))
    for mode in ("train", "infer"):
        add(f"batch_norm[{mode}]",
            lambda ops, p, mode=mode: ops.batch_norm(p["x"], p["gamma"], p["beta"], *stats, mode=mode)[0],
            {"x": 3.0 * normal(n, c, h, w), "gamma": (1.0 + 0.5 * normal(c)).astype(np.float32), "beta": normal(c)})

    n, c, h, w = _random_shape(rng)
    prediction = rng.uniform(0.05, 0.95, size=(n, 1, h, w)).astype(np.float32)
    truth = (rng.random((n, 1, h, w)) < 0.5).astype(np.float32)
    cases.append(("l1_loss", lambda ops, p: ops.l1_loss(p["prediction"], truth), {"prediction": prediction}))
    return cases


def tiny_pipeline_case(seed, size=8, channels=3, filters=4):
    """conv -> avg pool -> sigmoid -> L1 against a binary mask."""
    rng = np.random.default_rng(seed)
    conv = tc.Conv2dSpec(3, 3, stride=1, padding=1)
    inputs = {
        "image": rng.standard_normal((1, channels, size, size)).astype(np.float32),
        "conv.weight": (0.3 * rng.standard_normal((filters, channels, 3, 3))).astype(np.float32),
        "conv.bias": (0.1 * rng.standard_normal(filters)).astype(np.float32),
    }
    truth = (rng.random((1, filters, size // 2, size // 2)) < 0.5).astype(np.float32)

    def builder(ops, p):
        y = ops.conv2d(p["image"], p["conv.weight"], p["conv.bias"], conv)
        return ops.l1_loss(ops.sigmoid(ops.avg_pool2d(y)), truth)

    return builder, inputs
