"""Reference implementations used to check the package, written independently of it.

Everything here is deliberately naive (explicit loops, quaternions instead of
Rodrigues, per-joint matrix stacks) and imports nothing from the package.
"""
from __future__ import annotations

import math

import numpy as np


# ---------------------------------------------------------------- rotations


def quat_from_axis_angle(v):
    v = np.asarray(v, dtype=float)
    theta = math.sqrt(float(v @ v))
    if theta == 0.0:
        return np.array([1.0, 0.0, 0.0, 0.0])
    axis = v / theta
    return np.concatenate([[math.cos(theta / 2)], math.sin(theta / 2) * axis])


def quat_mul(p, q):
    w1, x1, y1, z1 = p
    w2, x2, y2, z2 = q
    return np.array([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ])


def quat_rotate(q, x):
    """Rotate vector x by unit quaternion q via q * (0, x) * q^-1."""
    conj = q * np.array([1.0, -1.0, -1.0, -1.0])
    return quat_mul(quat_mul(q, np.concatenate([[0.0], x])), conj)[1:]


def quat_to_matrix(q):
    """Columns are the images of the basis vectors."""
    return np.stack([quat_rotate(q, e) for e in np.eye(3)], axis=1)


# ---------------------------------------------------------------- forward kinematics


def fk_matrix_stack(parents, offsets, pose):
    """Per-joint 4x4 homogeneous transforms multiplied root-to-joint along the chain."""
    n = len(parents)
    out = np.zeros((n, 3))
    for j in range(n):
        chain = []
        k = j
        while k != -1:
            chain.append(k)
            k = parents[k]
        T = np.eye(4)
        for k in reversed(chain):
            local = np.eye(4)
            local[:3, :3] = quat_to_matrix(quat_from_axis_angle(pose[k]))
            local[:3, 3] = offsets[k] if parents[k] != -1 else 0.0
            T = T @ local
        out[j] = T[:3, 3]
    return out


def central_difference(f, x, step=1e-5):
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += step
        xm[idx] -= step
        g[idx] = (f(xp) - f(xm)) / (2 * step)
    return g


# ---------------------------------------------------------------- losses


def imq(x, y, C):
    d = sum((a - b) ** 2 for a, b in zip(x, y))
    return C / (C + d)


def mmd_double_loop(z, prior, C):
    n, m = len(z), len(prior)
    s_zz = sum(imq(z[i], z[j], C) for i in range(n) for j in range(n) if i != j)
    s_pp = sum(imq(prior[i], prior[j], C) for i in range(m) for j in range(m) if i != j)
    s_zp = sum(imq(z[i], prior[j], C) for i in range(n) for j in range(m))
    return s_zz / (n * (n - 1)) + s_pp / (m * (m - 1)) - 2.0 * s_zp / (n * m)


def _joint_error_loop(a, b):
    """Mean over batch*frames of the sum over joints of Euclidean 3-vector distances."""
    a = np.asarray(a).reshape(-1, a.shape[-2], 3)
    b = np.asarray(b).reshape(-1, b.shape[-2], 3)
    total = 0.0
    for f in range(a.shape[0]):
        for j in range(a.shape[1]):
            total += math.sqrt(sum((a[f, j, k] - b[f, j, k]) ** 2 for k in range(3)))
    return total / a.shape[0]


def reconstruction_loss_loop(target, rec_rot, rec_vel, parents, offsets, w_p):
    target = np.asarray(target)
    L_ang = _joint_error_loop(rec_rot, target) + _joint_error_loop(rec_vel, target)

    def positions(m):
        flat = np.asarray(m).reshape(-1, m.shape[-2], 3)
        return np.stack([fk_matrix_stack(parents, offsets, p) for p in flat])

    pt = positions(target)
    L_pos = _joint_error_loop(positions(rec_rot), pt) + _joint_error_loop(positions(rec_vel), pt)
    return L_ang, L_pos, L_ang + w_p * L_pos


def lsgan_loop(real, fakes):
    real = [float(v) for v in np.ravel(real)]
    fake = [float(v) for f in fakes for v in np.ravel(f)]
    L_D = 0.5 * sum(v * v for v in fake) / len(fake) + 0.5 * sum((v - 1) ** 2 for v in real) / len(real)
    L_G = 0.5 * sum((v - 1) ** 2 for v in fake) / len(fake)
    return L_D, L_G


# ---------------------------------------------------------------- networks


def _sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


def gru_step_loop(x, h, W, U, b, b_hn):
    """Scalar-loop GRU cell, gates ordered [reset, update, candidate] along the 3H axis."""
    H = len(h)
    out = np.zeros(H)
    pre_x = [sum(x[i] * W[i, k] for i in range(len(x))) + b[k] for k in range(3 * H)]
    pre_h = [sum(h[i] * U[i, k] for i in range(H)) for k in range(3 * H)]
    for k in range(H):
        r = _sigmoid(pre_x[k] + pre_h[k])
        u = _sigmoid(pre_x[H + k] + pre_h[H + k])
        n = math.tanh(pre_x[2 * H + k] + r * (pre_h[2 * H + k] + b_hn[k]))
        out[k] = (1 - u) * n + u * h[k]
    return out


def encode_loop(frames, w):
    """frames (T, D); w holds enc.* weights."""
    h = np.zeros(w["enc.U"].shape[0])
    for x in frames:
        h = gru_step_loop(x, h, w["enc.W"], w["enc.U"], w["enc.b"], w["enc.b_hn"])
    return np.array([sum(h[i] * w["enc.Wc"][i, k] for i in range(len(h))) for k in range(w["enc.Wc"].shape[1])])


def decode_loop(z, w, prefix, delta_t, residual):
    """Emission-order outputs of an autoregressive decoder, zero initial input."""
    We, Wo = w[f"{prefix}.We"], w[f"{prefix}.Wo"]
    h = np.array([sum(z[i] * We[i, k] for i in range(len(z))) for k in range(We.shape[1])])
    prev = np.zeros(Wo.shape[1])
    out = []
    for _ in range(delta_t):
        h = gru_step_loop(prev, h, w[f"{prefix}.W"], w[f"{prefix}.U"], w[f"{prefix}.b"], w[f"{prefix}.b_hn"])
        y = np.array([sum(h[i] * Wo[i, k] for i in range(len(h))) for k in range(Wo.shape[1])])
        if residual:
            y = y + prev
        out.append(y)
        prev = y
    return np.array(out)


def conv_length_by_enumeration(length, kernel, stride, pad):
    """Count window starts that fit inside the padded signal."""
    padded = length + 2 * pad
    return sum(1 for s in range(0, padded, stride) if s + kernel <= padded)


# ---------------------------------------------------------------- metrics


def interval_metric_loop(target, rec, parents, offsets, n_intervals=5):
    """Per-interval mean over frames of the joint-summed angle and position errors."""
    T = len(target)
    bounds = [round(i * T / n_intervals) for i in range(n_intervals + 1)]
    E_r, E_p = [], []
    for a, b in zip(bounds[:-1], bounds[1:]):
        er = ep = 0.0
        for t in range(a, b):
            pt = fk_matrix_stack(parents, offsets, target[t])
            pr = fk_matrix_stack(parents, offsets, rec[t])
            for j in range(len(parents)):
                er += math.dist(rec[t][j], target[t][j])
                ep += math.dist(pr[j], pt[j])
        E_r.append(er / (b - a))
        E_p.append(ep / (b - a))
    return np.array(E_r), np.array(E_p)
