"""Finite-difference gradient-check harness for the CNN.

Central differences are only valid where the loss is smooth, so the
check case is built deterministically with every conv/FC pre-activation
bounded away from the leaky-ReLU kink (bias repair), and the max-pool
routing is held fixed at the evaluation point's argmax while stepping.
Holding the routes realizes the subgradient of the operating branch;
analytic backprop uses the same argmax, so any routing or scatter bug
still shows up as a mismatch.

Perturbing 55k parameters one at a time is slow in pure Python, so
losses for many perturbed parameter copies are evaluated in one batched
forward pass (shared im2col, stacked matmuls).
"""

import numpy as np

from lesionkit.cnn import init_cnn, loss_and_grad

KINK_MARGIN_CONV1 = 1.0e-3
KINK_MARGIN_CONV2 = 1.5e-3
KINK_MARGIN_FC = 5.0e-3


def _im2col(x, k):
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(-3, -2))
    win = np.moveaxis(win, -3, -1)  # (..., Ho, Wo, kh, kw, C)
    lead = win.shape[:-5]
    ho, wo, kh, kw, c = win.shape[-5:]
    return win.reshape(*lead, ho * wo, kh * kw * c), (ho, wo)


def _leaky(x):
    return np.where(x > 0, x, 0.01 * x)


def _pool_windows(x):
    *lead, h, w, c = x.shape
    r = x.reshape(*lead, h // 2, 2, w // 2, 2, c)
    return np.moveaxis(r, -4, -3).reshape(*lead, h // 2, w // 2, 4, c)


def _pool_max(x):
    r = _pool_windows(x)
    arg = np.argmax(r, axis=-2)
    out = np.take_along_axis(r, np.expand_dims(arg, -2), axis=-2)
    return out[..., 0, :], arg


def _pool_routed(x, arg):
    """Max pooling with a fixed routing (argmax from the base point)."""
    r = _pool_windows(x)
    arg = np.broadcast_to(arg, r.shape[:-2] + r.shape[-1:])
    out = np.take_along_axis(r, np.expand_dims(arg, -2), axis=-2)
    return out[..., 0, :]


def _stage_values(net, patches):
    x = patches[..., None]
    cols1, (h1, w1) = _im2col(x, 5)
    a1 = (cols1 @ net.conv1_w.reshape(25, 8) + net.conv1_b).reshape(
        len(x), h1, w1, 8
    )
    p1, arg1 = _pool_max(_leaky(a1))
    cols2, (h2, w2) = _im2col(p1, 5)
    a2 = (cols2 @ net.conv2_w.reshape(200, 16) + net.conv2_b).reshape(
        len(x), h2, w2, 16
    )
    p2, arg2 = _pool_max(_leaky(a2))
    flat = p2.reshape(len(x), -1)
    f1 = flat @ net.fc1_w + net.fc1_b
    return a1, a2, f1, arg1, arg2


def _clearing_shift(values, margin):
    """Smallest bias shift putting every value at least `margin` from 0."""
    v = np.sort(values.ravel())
    if (np.abs(v) >= margin).all():
        return 0.0
    candidates = [v[0] - 1.5 * margin, v[-1] + 1.5 * margin]
    gaps = np.nonzero(np.diff(v) > 2 * margin)[0]
    candidates.extend(0.5 * (v[i] + v[i + 1]) for i in gaps)
    best = min(candidates, key=abs)
    return -best


def build_gradcheck_case(master_seed: int = 2024):
    """Deterministic (net, patches, labels) whose pre-activations all sit
    clear of the leaky-ReLU kink under 1e-4 parameter perturbations."""
    rng = np.random.default_rng(master_seed)
    patches = np.clip(rng.normal(size=(2, 32, 32)), -3.0, 3.0)
    labels = np.array([1, 3])
    for attempt in range(200):
        net = init_cnn(master_seed * 1000 + attempt).copy()
        a1, _, _, _, _ = _stage_values(net, patches)
        for k in range(8):
            net.conv1_b[k] += _clearing_shift(a1[..., k], KINK_MARGIN_CONV1)
        _, a2, _, _, _ = _stage_values(net, patches)
        for k in range(16):
            net.conv2_b[k] += _clearing_shift(a2[..., k], KINK_MARGIN_CONV2)
        _, _, f1, _, _ = _stage_values(net, patches)
        for u in range(128):
            net.fc1_b[u] += _clearing_shift(f1[:, u], KINK_MARGIN_FC)
        a1, a2, f1, _, _ = _stage_values(net, patches)
        if (
            np.abs(a1).min() >= KINK_MARGIN_CONV1 * 0.99
            and np.abs(a2).min() >= KINK_MARGIN_CONV2 * 0.8
            and np.abs(f1).min() >= KINK_MARGIN_FC * 0.99
        ):
            return net, patches, labels
    raise RuntimeError("no kink-safe gradient-check configuration found")


class _FdEvaluator:
    """Shared-prefix FD evaluator.

    Perturbing one parameter of a linear layer is a rank-1 update on that
    layer's base pre-activation, so each chunk copies only the perturbed
    layer's output and runs the (cheap, batched) downstream suffix with
    the pooling routes frozen.
    """

    def __init__(self, net, patches, labels):
        self.net = net
        self.labels = np.asarray(labels)
        x = patches[..., None]
        self.n = len(x)
        cols1, (h1, w1) = _im2col(x, 5)
        self.cols1 = cols1.reshape(-1, 25)
        a1 = (self.cols1 @ net.conv1_w.reshape(25, 8) + net.conv1_b)
        self.a1 = a1.reshape(self.n, h1, w1, 8)
        p1, self.arg1 = _pool_max(_leaky(self.a1))
        cols2, (h2, w2) = _im2col(p1, 5)
        self.cols2 = cols2.reshape(-1, 200)
        a2 = self.cols2 @ net.conv2_w.reshape(200, 16) + net.conv2_b
        self.a2 = a2.reshape(self.n, h2, w2, 16)
        p2, self.arg2 = _pool_max(_leaky(self.a2))
        self.flat = p2.reshape(self.n, 400)
        self.f1 = self.flat @ net.fc1_w + net.fc1_b
        self.h = _leaky(self.f1)

    def _loss_from_logits(self, logits):
        z = logits - logits.max(axis=-1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
        picked = logp[..., np.arange(self.n), self.labels - 1]
        return -picked.mean(axis=-1)

    def _suffix_f1(self, f1_stack):
        h = _leaky(f1_stack)
        logits = np.matmul(h, self.net.fc2_w) + self.net.fc2_b
        return self._loss_from_logits(logits)

    def _suffix_a2(self, a2_stack):
        b = len(a2_stack)
        p2 = _pool_routed(_leaky(a2_stack.reshape(b, self.n, 10, 10, 16)), self.arg2)
        flat = p2.reshape(b, self.n, 400)
        f1 = np.matmul(flat, self.net.fc1_w) + self.net.fc1_b
        return self._suffix_f1(f1)

    def _suffix_a1(self, a1_stack):
        b = len(a1_stack)
        p1 = _pool_routed(_leaky(a1_stack.reshape(b, self.n, 28, 28, 8)), self.arg1)
        cols2, _ = _im2col(p1, 5)
        a2 = np.matmul(cols2.reshape(b, -1, 200), self.net.conv2_w.reshape(200, 16))
        a2 = a2 + self.net.conv2_b
        return self._suffix_a2(a2)

    def losses(self, block, rows, cols_idx, signs, eps):
        """Losses after adding signs*eps at (row, col) of the block's
        weight matrix view (rows are fan-in indices, cols outputs)."""
        b = len(rows)
        bi = np.arange(b)
        if block in ("conv1_w", "conv1_b"):
            stack = np.repeat(self.a1.reshape(1, -1, 8), b, axis=0)
            delta = self.cols1[:, rows].T if block == "conv1_w" else 1.0
            stack[bi, :, cols_idx] += np.atleast_2d(signs * eps).T * delta
            return self._suffix_a1(stack)
        if block in ("conv2_w", "conv2_b"):
            stack = np.repeat(self.a2.reshape(1, -1, 16), b, axis=0)
            delta = self.cols2[:, rows].T if block == "conv2_w" else 1.0
            stack[bi, :, cols_idx] += np.atleast_2d(signs * eps).T * delta
            return self._suffix_a2(stack)
        if block in ("fc1_w", "fc1_b"):
            stack = np.repeat(self.f1[None], b, axis=0)
            delta = self.flat[:, rows].T if block == "fc1_w" else 1.0
            stack[bi, :, cols_idx] += np.atleast_2d(signs * eps).T * delta
            return self._suffix_f1(stack)
        logits = self.h @ self.net.fc2_w + self.net.fc2_b
        stack = np.repeat(logits[None], b, axis=0)
        delta = self.h[:, rows].T if block == "fc2_w" else 1.0
        stack[bi, :, cols_idx] += np.atleast_2d(signs * eps).T * delta
        return self._loss_from_logits(stack)


def fd_gradient_block(net, patches, labels, block, indices=None,
                      eps=1e-4, chunk=4096, evaluator=None):
    """Central-difference gradient for one parameter block."""
    ev = evaluator or _FdEvaluator(net, patches, labels)
    arr = net.blocks()[block]
    if indices is None:
        indices = np.arange(arr.size)
    indices = np.asarray(indices)
    n_out = arr.shape[-1]
    if block.endswith("_b"):
        rows = np.zeros(len(indices), dtype=np.int64)
        cols_idx = indices
    else:
        rows, cols_idx = np.divmod(indices, n_out)
    out = np.zeros(len(indices))
    for start in range(0, len(indices), chunk):
        sl = slice(start, start + chunk)
        r, c = rows[sl], cols_idx[sl]
        k = len(r)
        lp = ev.losses(block, r, c, np.ones(k), eps)
        lm = ev.losses(block, r, c, -np.ones(k), eps)
        out[sl] = (lp - lm) / (2 * eps)
    return out


def rel_error_max(analytic, fd):
    """Max-norm relative disagreement between gradient estimates."""
    denom = max(np.abs(analytic).max(), np.abs(fd).max(), 1e-12)
    return float(np.abs(analytic - fd).max() / denom)


def check_all_blocks(net, patches, labels, indices_per_block=None, eps=1e-4):
    """Compare analytic vs FD gradients; returns {block: rel error}."""
    _, grads = loss_and_grad(net, patches, labels)
    report = {}
    for block, g in grads.blocks().items():
        idx = None if indices_per_block is None else indices_per_block[block]
        fd = fd_gradient_block(net, patches, labels, block, idx, eps)
        an = g.ravel() if idx is None else g.ravel()[idx]
        report[block] = rel_error_max(an, fd)
    return report
