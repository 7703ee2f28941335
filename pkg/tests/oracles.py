"""Independent reference implementations used to cross-check the package.

Everything here is deliberately written the slow, explicit way (numpy
loops, dense matrices) and never calls into the code paths under test.
"""

from __future__ import annotations

import numpy as np


def haar_transform_matrix(h: int, w: int) -> np.ndarray:
    """Dense (h*w, h*w) matrix of the orthonormal single-level 2D Haar DWT.

    Output ordering: the four subbands stacked [ll, lh, hl, hh], each in
    row-major order over the (h/2, w/2) grid. Input is the row-major
    flattened image.
    """
    assert h % 2 == 0 and w % 2 == 0
    hh, hw = h // 2, w // 2
    n = h * w
    mat = np.zeros((n, n))
    # per-band sign patterns over the 2x2 block [[a, b], [c, d]]
    signs = {
        0: ((1, 1), (1, 1)),    # ll
        1: ((1, 1), (-1, -1)),  # lh: low along width, high along height
        2: ((1, -1), (1, -1)),  # hl
        3: ((1, -1), (-1, 1)),  # hh
    }
    for band in range(4):
        s = signs[band]
        for i in range(hh):
            for j in range(hw):
                row = band * hh * hw + i * hw + j
                for di in range(2):
                    for dj in range(2):
                        col = (2 * i + di) * w + (2 * j + dj)
                        mat[row, col] = 0.5 * s[di][dj]
    return mat


def dense_gru_step(
    x: np.ndarray,
    h: np.ndarray,
    w_gates: np.ndarray,
    b_gates: np.ndarray,
    w_cand: np.ndarray,
    b_cand: np.ndarray,
) -> np.ndarray:
    """GRU update with dense maps; weights are the conv kernels' center taps.

    x, h: (C_in,), (C_h,) vectors. w_gates: (2*C_h, C_in + C_h),
    w_cand: (C_h, C_in + C_h); the concatenation order is [x, h].
    """
    sigmoid = lambda v: 1.0 / (1.0 + np.exp(-v))
    ch = h.shape[0]
    gates = sigmoid(w_gates @ np.concatenate([x, h]) + b_gates)
    z, r = gates[:ch], gates[ch:]
    cand = np.tanh(w_cand @ np.concatenate([x, r * h]) + b_cand)
    return (1.0 - z) * h + z * cand


def batchnorm_eval(y, gamma, beta, running_mean, running_var, eps):
    """Per-channel eval-mode batch norm on a (B, C, H, W) array."""
    out = np.empty_like(y)
    for c in range(y.shape[1]):
        out[:, c] = (y[:, c] - running_mean[c]) / np.sqrt(running_var[c] + eps) * gamma[
            c
        ] + beta[c]
    return out


def cross_attention_reference(f_gen, f_enc, layer) -> np.ndarray:
    """Scalar-loop evaluation of the residual cross-attention fusion.

    ``layer`` supplies the 1x1 projection weights and eval-mode batch-norm
    buffers; all math below is plain numpy over explicit position loops.
    """
    wq = layer.q_proj.weight.detach().numpy()[..., 0, 0]
    bq = layer.q_proj.bias.detach().numpy()
    wk = layer.k_proj.weight.detach().numpy()[..., 0, 0]
    bk = layer.k_proj.bias.detach().numpy()
    wv = layer.v_proj.weight.detach().numpy()[..., 0, 0]
    bv = layer.v_proj.bias.detach().numpy()
    wo = layer.out_proj.weight.detach().numpy()[..., 0, 0]
    bo = layer.out_proj.bias.detach().numpy()
    gamma = layer.bn.weight.detach().numpy()
    beta = layer.bn.bias.detach().numpy()
    rmean = layer.bn.running_mean.detach().numpy()
    rvar = layer.bn.running_var.detach().numpy()
    eps = layer.bn.eps
    d = layer.d
    alpha = layer.alpha

    fg = f_gen.detach().numpy().astype(np.float64)
    fe = f_enc.detach().numpy().astype(np.float64)
    b, c, h, w = fg.shape
    n = h * w

    out = np.empty_like(fg)
    for bi in range(b):
        # project each spatial position
        q = np.zeros((n, d))
        k = np.zeros((n, d))
        v = np.zeros((n, d))
        for idx in range(n):
            i, j = divmod(idx, w)
            q[idx] = wq @ fg[bi, :, i, j] + bq
            k[idx] = wk @ fe[bi, :, i, j] + bk
            v[idx] = wv @ fe[bi, :, i, j] + bv
        attended = np.zeros((n, d))
        for row in range(n):
            logits = np.array([q[row] @ k[col] / np.sqrt(d) for col in range(n)])
            weights = np.exp(logits - logits.max())
            weights /= weights.sum()
            for col in range(n):
                attended[row] += weights[col] * v[col]
        y = np.zeros((1, c, h, w))
        for idx in range(n):
            i, j = divmod(idx, w)
            y[0, :, i, j] = wo @ attended[idx] + bo
        y = batchnorm_eval(y, gamma, beta, rmean, rvar, eps)
        out[bi] = fg[bi] + alpha * y[0]
    return out


def adaptive_l1_reference(gen, gt, embed_patch, alpha, beta, grid) -> float:
    """Scalar-loop similarity-weighted L1.

    ``embed_patch`` maps one (C, ph, pw) numpy patch to an embedding vector.
    """
    g = gen.detach().numpy().astype(np.float64)
    t = gt.detach().numpy().astype(np.float64)
    b, c, h, w = g.shape
    rows, cols = grid
    ph, pw = h // rows, w // cols
    total = 0.0
    count = 0
    for bi in range(b):
        for r in range(rows):
            for s in range(cols):
                gp = g[bi, :, r * ph : (r + 1) * ph, s * pw : (s + 1) * pw]
                tp = t[bi, :, r * ph : (r + 1) * ph, s * pw : (s + 1) * pw]
                zg = embed_patch(gp)
                zt = embed_patch(tp)
                zg = zg / np.linalg.norm(zg)
                zt = zt / np.linalg.norm(zt)
                sim = float(zg @ zt)
                mae = np.abs(gp - tp).mean()
                total += (alpha + beta * sim) * mae
                count += 1
    return total / count


def gaussian_cloud_with_exact_moments(rng, n, mu, sigma_diag):
    """Samples whose *empirical* mean/cov (ddof=1) equal mu, diag(sigma_diag).

    Draw, whiten empirically, recolor: the sample moments then match the
    targets exactly up to rounding.
    """
    d = len(mu)
    z = rng.standard_normal((n, d))
    z -= z.mean(axis=0)
    cov = np.cov(z, rowvar=False)
    vals, vecs = np.linalg.eigh(cov)
    white = z @ vecs @ np.diag(1.0 / np.sqrt(vals)) @ vecs.T
    return white @ np.diag(np.sqrt(sigma_diag)) + np.asarray(mu)


def frechet_diagonal(mu1, var1, mu2, var2) -> float:
    """Closed-form Frechet distance for diagonal-covariance Gaussians."""
    mu1, mu2 = np.asarray(mu1), np.asarray(mu2)
    var1, var2 = np.asarray(var1), np.asarray(var2)
    return float(((mu1 - mu2) ** 2).sum() + ((np.sqrt(var1) - np.sqrt(var2)) ** 2).sum())


def central_difference(f, tensor, index, eps: float) -> float:
    """Central finite difference of scalar-valued f w.r.t. tensor[index]."""
    import torch

    with torch.no_grad():
        orig = tensor[index].item()
        tensor[index] = orig + eps
        up = float(f())
        tensor[index] = orig - eps
        down = float(f())
        tensor[index] = orig
    return (up - down) / (2 * eps)
